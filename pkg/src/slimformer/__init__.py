"""Configurable BERT-style encoder workbench.

Three composable architecture axes (periodic intermediate-block
removal, normalized softmax-free attention, MLP-layernorm removal), a
trainable f64 autodiff core, exact parameter/FLOP accounting, and a
CPU throughput benchmark harness.
"""

from .tensor import (Tensor, Tape, backward, grad_check, no_grad, fresh_tape,
                     count_flops, matmul, gelu, softmax_rows, normalize_rows,
                     layer_norm, dropout, cross_entropy_logits)
from .attention import (AttentionParams, attention_logits, scores_softmax,
                        scores_normalized, attention_output, self_attention,
                        SOFTMAX, NORMALIZED_BANDD)
from .encoder import (EncoderConfig, EncoderStack, IntermediatePeriod,
                      ParamCount, intermediate_positions, build_stack,
                      count_parameters, size_ratio, forward,
                      serialize_checkpoint, load_checkpoint,
                      peek_checkpoint_config, BERT_BASE, bandd,
                      no_mlp_layernorm)
from .training import (TrainConfig, SyntheticTask, ClassificationTask, RunLog,
                       RunStatus, lr_schedule, loss_with_l2, pretrain_mlm,
                       finetune_classifier, detect_divergence, mlm_eval_loss)
from .bench import (BenchSpec, BenchReport, analytic_flops,
                    instrumented_flops, flop_ratio, measure_throughput, sweep)
from .verify import run_grad_check_suite

__version__ = "0.1.0"
