from .checkpoint import (
    CheckpointError, config_hash, load_checkpoint, read_manifest, save_checkpoint,
)
from .gradcheck import grad_check
from .layers import (
    BiGRU, Conv1d, Embedding, GRU, Highway, LayerNorm, Linear, MaxPool1d, Module,
    MultiHeadAttention, Parameter, embedding_lookup, layer_norm, log_softmax, relu,
    relu_backward, sigmoid, sinusoidal_positional_encoding, softmax, softmax_backward,
)
from .optim import Adam, NonFiniteGradientError, adam_update, noam_lr
