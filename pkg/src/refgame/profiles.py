"""Model size presets.

"paper" mirrors the reported architecture (speaker LSTM 2048, listener LSTM
1024, recurrent dropout 0.7, batch-normalized image head); "desk" is the
CPU-scale default used by the tests. The two-stage schedule survives as an
optional low-rate second phase.
"""

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class Profile:
    name: str
    speaker_hidden: int
    listener_hidden: int
    embed_dim: int
    image_head_hidden: int
    dropout: float
    batch_norm: bool
    batch_size: int
    learning_rate: float = 1e-3
    stage2_learning_rate: float = 5e-6


DESK = Profile(
    name="desk",
    speaker_hidden=128,
    listener_hidden=128,
    embed_dim=64,
    image_head_hidden=256,
    dropout=0.0,
    batch_norm=False,
    batch_size=64,
)

PAPER = Profile(
    name="paper",
    speaker_hidden=2048,
    listener_hidden=1024,
    embed_dim=256,
    image_head_hidden=256,
    dropout=0.7,
    batch_norm=True,
    batch_size=64,
)

PROFILES = {"desk": DESK, "paper": PAPER}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None
