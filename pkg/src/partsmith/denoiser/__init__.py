from .base import DenoiserBackend
from .schedule import NoiseSchedule, sinusoidal_embedding
from .toy import ToyDenoiser, ToyDenoiserBackend, ToyLatentCodec, build_toy_backend
from .lora import LoraLinear, attach_lora, lora_parameters, lora_parameter_count
from .remote import RemoteDenoiserBackend

__all__ = [
    "DenoiserBackend",
    "NoiseSchedule",
    "sinusoidal_embedding",
    "ToyDenoiser",
    "ToyDenoiserBackend",
    "ToyLatentCodec",
    "build_toy_backend",
    "LoraLinear",
    "attach_lora",
    "lora_parameters",
    "lora_parameter_count",
    "RemoteDenoiserBackend",
]
