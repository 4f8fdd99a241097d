"""Multi-talker source separation with talker counting and a small
CTC/attention recognizer, on synthetic desk-scale data."""

from .asr import (AsrConfig, AsrModel, AsrOutput, Vocabulary, asr_loss,
                  ctc_best_path, ctc_forward_nll, decode_greedy,
                  edit_distance_rate, load_asr, save_asr, stft_features)
from .counting import (CalibrationResult, ExtractionResult, StopRule,
                       calibrate_threshold, count_fixed_outputs,
                       extract_iteratively, select_top_k_energy,
                       threshold_stop)
from .joint import (JointBatchResult, joint_loss, resolve_permutation_by_fe,
                    train_step_orpit_multi_iteration,
                    train_step_orpit_single_iteration,
                    train_step_tasnet_joint, unrolled_extraction, vad_gate)
from .losses import (LossValue, flag_bce, orpit_loss, pit_loss, t_l1pmse,
                     t_lmse)
from .metrics import (MetricRecord, counting_accuracy, metric_assignment,
                      sdr, sdri, si_sdr)
from .separator import (DprnnSeparator, SeparatorConfig, SeparatorOutput,
                        load_separator, save_separator)
from .signals import (DatasetManifest, DatasetSpec, MixtureExample, Waveform,
                      build_dataset, load_manifest, make_mixture, read_wav,
                      synth_source, write_wav)

__version__ = "0.1.0"
