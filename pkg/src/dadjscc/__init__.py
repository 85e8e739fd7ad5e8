"""Doubly adaptive deep joint source-channel coding for image transmission.

SNR-conditioned channel-wise and spatial attention inside a small CNN
autoencoder, trained end to end through a simulated AWGN/fading channel.
"""

from .attention import ChannelAttention, SpatialAttention, channel_attention, spatial_attention
from .channel import (ChannelConfig, ChannelDraw, apply_fading_awgn, draw_channel, equalize,
                      noise_sigma_for_snr, power_normalize, transmit)
from .data import ImageDataset, batch_iter, load_cifar, take_subset
from .layers import Conv2dSpec, Parameter, compute_memory_mb, count_params
from .metrics import MetricRecord, psnr, snr_sweep, ssim
from .models import (Model, VariantSpec, build_model, decode, encode, end_to_end,
                     load_checkpoint, save_checkpoint)
from .tensor import Tape, Tensor, backward, tensor_from
from .training import TrainConfig, fit, train_epoch

__version__ = "0.1.0"
