"""Topic names used on the control plane.

Only the four reserved top levels appear here: platform, infrastructure,
service and function.  Operators can extend the tree by policy; plugins added
at runtime pick their own subtopics.
"""

# plugin manager plumbing
PLUGIN_HEARTBEAT = "platform.management.plugin.heartbeat"
PLUGIN_REGISTER = "platform.management.plugin.register"

# slice admission control
SLICE_ADMIT = "platform.slicing.admit"
SLICE_RELEASE = "platform.slicing.release"

# service lifecycle commands and events
SERVICE_CREATE = "service.instances.create"
SERVICE_TERMINATE = "service.instances.terminate"
SERVICE_SCALE = "service.instances.scale"
SERVICE_EVENTS = "service.instances.events"

# placement executive
PLACEMENT_REQUEST = "service.placement.request"
PLACEMENT_RESPONSE = "service.placement.response"

# per-function deployment against the infrastructure adaptor
FUNCTION_DEPLOY = "function.lifecycle.deploy"
FUNCTION_RELEASE = "function.lifecycle.release"
CHAIN_INSTALL = "infrastructure.chain.install"
CHAIN_REMOVE = "infrastructure.chain.remove"

# emulated infrastructure clock and monitoring stream
CLOCK_TICK = "infrastructure.clock.tick"
MONITORING_PREFIX = "function.monitoring"


def monitoring_topic(instance_id: str, metric: str) -> str:
    return f"{MONITORING_PREFIX}.{instance_id}.{metric}"


def placement_ssm_topic(service_id: str, suffix: str) -> str:
    """Dedicated namespace for placement strategy traffic of one service."""
    return f"service.placement.ssm.{service_id}.{suffix}"


def scaling_ssm_topic(service_id: str, suffix: str) -> str:
    """Dedicated namespace for scaling strategy traffic of one service."""
    return f"service.scaling.ssm.{service_id}.{suffix}"
