"""ConvNeXt V2 + fully convolutional masked autoencoding at desk scale."""

from .convnext import (ActivationCapture, BlockConfig, Model, ModelConfig,
                       VARIANTS, build_model, classify, count_flops,
                       count_params, forward, forward_dense, forward_sparse)
from .fcmae import (Decoder, DecoderConfig, MaskPyramid, MaskSpec,
                    generate_mask, patchify_and_normalize, pretrain_step,
                    reconstruction_loss, upsample_mask)
from .grn import GrnConfig, GrnParams, aggregate, grn_forward, normalize
from .nn import ConvSpec, conv2d, conv2d_reference, cross_entropy, drop_path, gelu, layer_norm
from .optim import AdamW, Schedule, layerwise_lr_decay, lr_at
from .sparse import (CoordMap, SparseBatch, SparseTensor, dense_to_sparse,
                     masked_dense_conv, sparse_to_dense, submanifold_conv)
from .tensor import Param, Tape, Tensor, backward, grad_check, no_grad

__all__ = [name for name in dir() if not name.startswith("_")]
