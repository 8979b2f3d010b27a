"""Feed-forward arbitrary style transfer with patch attention,
multi-level feature fusion, and region-based multi-style fusion."""

from .decoder import Amplifier, Decoder, decode, merge
from .encoder import (VggEncoder, default_weights_path, encode, load_encoder,
                      parameter_checksum, random_encoder_weights,
                      save_encoder_weights)
from .fusion import (RegionLabeling, StyleAssignment, assign_styles,
                     assign_styles_discrete, cluster_content, compose_hybrid,
                     kmeans)
from .images import load_image, save_image, snap_to_stride
from .losses import (LossBreakdown, LossConfig, NonFiniteLossError,
                     content_loss, contextual_loss, identity_loss, style_loss,
                     total_loss)
from .mff import ChannelGate, FeatureFusion
from .model import (ModelConfig, MultiStyleResult, StyleMixer, load_checkpoint,
                    save_checkpoint)
from .patch_attention import (PatchAttention, attention_map, channel_normalize,
                              confidence, unfold_patches)
from .training import TrainConfig, parse_config, prepare_batch, train, train_step

__version__ = "0.1.0"
