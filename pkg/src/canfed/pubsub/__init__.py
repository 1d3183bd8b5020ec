"""MQTT-style publish/subscribe with QoS-2 exactly-once delivery."""

from .loopback import FaultSpec, LoopbackClient, LoopbackNetwork
from .wire import MsgType, WireFrame, decode, encode

LOCAL_TOPIC = "fl/local"
GLOBAL_TOPIC = "fl/global"

__all__ = [
    "FaultSpec",
    "LoopbackClient",
    "LoopbackNetwork",
    "MsgType",
    "WireFrame",
    "decode",
    "encode",
    "LOCAL_TOPIC",
    "GLOBAL_TOPIC",
]
