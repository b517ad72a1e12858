from son.broker.core import (
    BrokerError,
    Message,
    MessageBroker,
    PermissionDenied,
    PermissionSet,
    Receipt,
    RequestTimeout,
    UnknownClient,
)
from son.broker.matching import BACKEND, topic_matches
from son.broker.topics import (
    Pattern,
    Topic,
    TopicError,
    parse_pattern,
    parse_topic,
    pattern_covers,
    patterns_intersect,
)

__all__ = [
    "BACKEND",
    "BrokerError",
    "Message",
    "MessageBroker",
    "Pattern",
    "PermissionDenied",
    "PermissionSet",
    "Receipt",
    "RequestTimeout",
    "Topic",
    "TopicError",
    "UnknownClient",
    "parse_pattern",
    "parse_topic",
    "pattern_covers",
    "patterns_intersect",
    "topic_matches",
]
