"""Echo noise channel: exact-rate stochastic encoding and rate-distortion autoencoders."""

from .echo import (
    ChannelDraw,
    EchoConfig,
    EncoderOutput,
    apply_channel,
    echo_rate,
    rate_floor,
    remainder_bound,
    sample_echo_batch,
    sample_echo_iid,
    solve_clip,
)

__all__ = [
    "ChannelDraw",
    "EchoConfig",
    "EncoderOutput",
    "apply_channel",
    "echo_rate",
    "rate_floor",
    "remainder_bound",
    "sample_echo_batch",
    "sample_echo_iid",
    "solve_clip",
]
