"""Hybrid text/image autoregressive alignment trainer.

A desk-scale multimodal trainer built on a from-scratch float64 autodiff
core. Text-mode samples train with next-token cross-entropy; image-mode
samples train decoder hidden states at image positions to reconstruct the
projector's patch embeddings, combined as total = l_text + alpha * l_image.
"""

from .data import (DatasetSpec, MultimodalSample, SyntheticScene, Vocabulary,
                   VOCAB, VOCAB_SIZE, caption, decode_caption, generate_dataset,
                   generate_sample, read_dataset, write_dataset)
from .diagnostics import (AttentionFlowMap, MIEstimate, ProbeReport,
                          attention_flow, discrete_mutual_information,
                          mi_trajectory, quantize_embeddings,
                          reconstruction_probe, write_heatmap,
                          write_mi_trajectory)
from .model import (ForwardOutput, ModelConfig, PatchGrid, SequenceLayout,
                    assemble_sequence, encode_and_project, forward,
                    greedy_decode, init_parameters, parameter_count, patchify,
                    run_sample, unpatchify)
from .objective import (BatchItem, LossBreakdown, LossVariant, ModeLabel,
                        hybrid_loss, image_alignment_loss, supervision_masks)
from .tensor import Tape, Tensor, backward, finite_diff_gradcheck
from .trainer import (EpochPlan, OptimizerState, StageResult, TrainConfig,
                      build_epoch_plan, build_half_split_plan, load_checkpoint,
                      lr_schedule, run_stage, save_checkpoint, train_step)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
