"""Executive plugins: hosts for developer-supplied placement and scaling
strategies.

On-boarding probe-evaluates a program against a canonical synthetic
environment under a CPU and step budget before it may influence decisions.
Executives never trust strategy output: feasibility is always re-checked, and
topology views handed to strategies can be filtered and coarsened.  Conflicts
between competing strategies are resolved by a deterministic priority order.
"""

from __future__ import annotations

import logging
import threading
from bisect import bisect_right
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from son import dsl, wire
from son.broker.core import Message
from son.errors import PlatformError
from son.plugins import BasePlugin, PluginManifest
from son.resources import Resources

log = logging.getLogger(__name__)

#: Built-in scaling behaviour used when a service ships no strategy: scale out
#: above 80% average load, scale in below 20% (the replica floor of 1 comes
#: from clamping).
DEFAULT_SCALING_SOURCE = (
    "when avg(cpu_load, 60) > 0.8 then replicas + 1\n"
    "when avg(cpu_load, 60) < 0.2 then replicas - 1"
)

PROBE_CPU_SECONDS = 0.1

TIER_SSM = 0
TIER_FSM = 1
TIER_DEFAULT = 2


class ExecutiveError(PlatformError):
    pass


class ProbeFailed(ExecutiveError):
    def __init__(self, reason: str):
        super().__init__(f"on-boarding probe failed: {reason}")
        self.reason = reason


class NoFeasiblePoP(ExecutiveError):
    def __init__(self, vnf: str):
        super().__init__(f"no PoP can host {vnf!r}")
        self.vnf = vnf


class NoFeasibleDecision(ExecutiveError):
    pass


# ---------------------------------------------------------------------------
# topology views
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PopView:
    """What a strategy may see of one PoP (possibly coarsened)."""

    pop_id: str
    cpu_free: int
    mem_free: int
    storage_free: int
    latency_ms: tuple[tuple[str, float], ...] = ()
    pseudo_child_id: Optional[str] = None

    def free(self) -> Resources:
        return Resources(self.cpu_free, self.mem_free, self.storage_free)

    def latency_to(self, target: str) -> Optional[float]:
        for name, value in self.latency_ms:
            if name == target:
                return value
        return None


@dataclass(frozen=True)
class TopologyPolicy:
    """Per-service view restriction: PoP allow-list plus attribute coarsening."""

    allowed_pops: Optional[frozenset[str]] = None  # None = allow all
    coarsening_step: int = 1


def filter_topology(view: list[PopView], policy: TopologyPolicy) -> list[PopView]:
    """Restricts and coarsens a topology view.

    Free-capacity attributes are rounded down to the coarsening step, so a
    view can only under-report capacity, never fabricate it.
    """
    step = max(1, policy.coarsening_step)

    def coarsen(value: int) -> int:
        return (value // step) * step

    out = []
    for pop in view:
        if policy.allowed_pops is not None and pop.pop_id not in policy.allowed_pops:
            continue
        out.append(
            replace(
                pop,
                cpu_free=coarsen(pop.cpu_free),
                mem_free=coarsen(pop.mem_free),
                storage_free=coarsen(pop.storage_free),
            )
        )
    return out


# ---------------------------------------------------------------------------
# evaluation environments
# ---------------------------------------------------------------------------

@dataclass
class PlacementEnvironment:
    """Attribute bindings for scoring one candidate PoP for one request."""

    pop: PopView
    required: Resources

    def attribute(self, name: str, key: Optional[str]) -> float:
        if name == "latency_ms":
            target = key or "user"
            value = self.pop.latency_to(target)
            if value is None:
                raise dsl.UnknownAttribute(f"latency_ms[{target}]")
            return value
        if key is not None:
            raise dsl.UnknownAttribute(f"{name}[{key}]")
        simple = {
            "cpu_free": float(self.pop.cpu_free),
            "mem_free": float(self.pop.mem_free),
            "storage_free": float(self.pop.storage_free),
            "required_cpu": float(self.required.cpu_cores),
            "required_mem": float(self.required.memory_mb),
            "required_storage": float(self.required.storage_gb),
        }
        if name not in simple:
            raise dsl.UnknownAttribute(name)
        return simple[name]

    def window_average(self, metric: str, window_s: int, key: Optional[str]) -> float:
        raise dsl.UnknownMetric(metric)


@dataclass
class ScalingEnvironment:
    """Sliding metric windows plus the current replica count."""

    windows: dict[str, list[tuple[float, float]]]
    now: float
    replicas: int

    def attribute(self, name: str, key: Optional[str]) -> float:
        if name == "replicas" and key is None:
            return float(self.replicas)
        raise dsl.UnknownAttribute(name if key is None else f"{name}[{key}]")

    def window_average(self, metric: str, window_s: int, key: Optional[str]) -> float:
        if key is not None:
            raise dsl.UnknownMetric(f"{metric}[{key}]")
        if metric not in self.windows:
            raise dsl.UnknownMetric(metric)
        samples = self.windows[metric]
        cutoff = self.now - window_s
        start = bisect_right(samples, cutoff, key=lambda s: s[0])
        recent = samples[start:]
        if not recent:
            raise dsl.NoSamples()
        return sum(v for _, v in recent) / len(recent)


# ---------------------------------------------------------------------------
# on-boarding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SsmHandle:
    handle_id: str
    program: dsl.SsmProgram
    service_key: str
    tier: int  # TIER_SSM or TIER_FSM
    scope_vnf: Optional[str]
    onboard_seq: int


_PROBE_POPS = (
    PopView("pop-a", 4, 4096, 10, latency_ms=(("user", 10.0), ("pop-b", 2.0))),
    PopView("pop-b", 8, 8192, 20, latency_ms=(("user", 5.0), ("pop-a", 2.0))),
)
_PROBE_REQUIRED = Resources(1, 512, 1)
_PROBE_SAMPLES = [(0.0, 0.5), (30.0, 0.6), (60.0, 0.7)]


def probe_program(program: dsl.SsmProgram) -> None:
    """Evaluates a program against the canonical synthetic environment.

    Raises BudgetExceeded or TypeMismatch from the evaluation itself, or
    ProbeFailed for any other defect (unknown attribute, empty result, ...).
    """
    budget = dsl.Budget(dsl.DEFAULT_STEP_BUDGET, cpu_seconds=PROBE_CPU_SECONDS)
    try:
        if program.kind is dsl.ProgramKind.PLACEMENT:
            for pop in _PROBE_POPS:
                env = PlacementEnvironment(pop, _PROBE_REQUIRED)
                dsl.evaluate_score(program, env, budget)
        else:
            # One canonical window per declared metric avoids rejecting
            # programs that monitor something other than cpu_load.
            metrics = set(program.declared_inputs) - {"replicas"} or {"cpu_load"}
            env = ScalingEnvironment(
                windows={m: list(_PROBE_SAMPLES) for m in metrics},
                now=60.0,
                replicas=1,
            )
            for index, rule in enumerate(program.rules):
                try:
                    dsl.evaluate_expr(rule.left, env, budget)
                    dsl.evaluate_expr(rule.right, env, budget)
                    if isinstance(rule.action, dsl.ReplicaSet):
                        dsl.evaluate_expr(rule.action.expr, env, budget)
                except dsl.NoSamples:
                    continue
    except (dsl.BudgetExceeded, dsl.TypeMismatch):
        raise
    except dsl.DslError as exc:
        raise ProbeFailed(str(exc)) from exc


class _HandleRegistry:
    """Thread-safe table of on-boarded strategy programs."""

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._seq = 0
        self._by_service: dict[str, SsmHandle] = {}
        self._by_vnf: dict[tuple[str, str], SsmHandle] = {}

    def onboard(
        self, program: dsl.SsmProgram, service_key: str, scope_vnf: Optional[str] = None
    ) -> SsmHandle:
        probe_program(program)
        with self._lock:
            self._seq += 1
            handle = SsmHandle(
                handle_id=f"ssm-{self._seq}",
                program=program,
                service_key=service_key,
                tier=TIER_FSM if scope_vnf else TIER_SSM,
                scope_vnf=scope_vnf,
                onboard_seq=self._seq,
            )
            if scope_vnf:
                self._by_vnf[(service_key, scope_vnf)] = handle
            else:
                self._by_service[service_key] = handle
            return handle

    def service_handle(self, service_key: str) -> Optional[SsmHandle]:
        with self._lock:
            return self._by_service.get(service_key)

    def vnf_handle(self, service_key: str, vnf: str) -> Optional[SsmHandle]:
        with self._lock:
            return self._by_vnf.get((service_key, vnf))

    def drop_service(self, service_key: str) -> None:
        with self._lock:
            self._by_service.pop(service_key, None)
            for key in [k for k in self._by_vnf if k[0] == service_key]:
                del self._by_vnf[key]


# ---------------------------------------------------------------------------
# conflict resolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecisionCandidate:
    tier: int
    onboard_seq: int
    decision: object


def resolve_conflict(
    candidates: list[DecisionCandidate], feasible: Callable[[object], bool]
) -> object:
    """Deterministic priority: service strategy beats function strategy beats
    platform default; within a tier the earliest on-boarded wins.  Infeasible
    decisions fall through to the next candidate."""
    if not candidates:
        raise NoFeasibleDecision("no decisions to resolve")
    for candidate in sorted(candidates, key=lambda c: (c.tier, c.onboard_seq)):
        if feasible(candidate.decision):
            return candidate.decision
    raise NoFeasibleDecision("every candidate decision is infeasible")


# ---------------------------------------------------------------------------
# placement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlacementUnit:
    vnf_name: str
    resources: Resources


def plan_placement(
    strategy: Optional[SsmHandle],
    units: list[PlacementUnit],
    view: list[PopView],
) -> list[str]:
    """Assigns every unit to a PoP from the view, deducting as it goes.

    Candidates are the PoPs with sufficient remaining free capacity; the
    strategy only ranks them.  DEFAULT (strategy None) is first-fit over PoP
    ids sorted ascending.  Strategy scores pick the argmax, ties broken by
    the lexicographically smallest PoP id.
    """
    remaining = {pop.pop_id: pop.free() for pop in view}
    by_id = {pop.pop_id: pop for pop in view}
    assignment = []
    for unit in units:
        candidates = [
            pop_id
            for pop_id in sorted(remaining)
            if unit.resources.fits_within(remaining[pop_id])
        ]
        if not candidates:
            raise NoFeasiblePoP(unit.vnf_name)
        if strategy is None:
            chosen = candidates[0]
        else:
            best_score = None
            chosen = None
            for pop_id in candidates:
                current = by_id[pop_id]
                free_now = remaining[pop_id]
                env = PlacementEnvironment(
                    replace(
                        current,
                        cpu_free=free_now.cpu_cores,
                        mem_free=free_now.memory_mb,
                        storage_free=free_now.storage_gb,
                    ),
                    unit.resources,
                )
                score = dsl.evaluate_score(strategy.program, env, dsl.Budget())
                if best_score is None or score > best_score:
                    best_score = score
                    chosen = pop_id
            assert chosen is not None
        remaining[chosen] = remaining[chosen] - unit.resources
        assignment.append(chosen)
    return assignment


class PlacementExecutive(BasePlugin):
    """Answers placement requests, hosting per-service placement strategies.

    Child platforms appear as pseudo-PoPs but stay out of the regular
    candidate view: they are used when the request restricts placement to
    them or when the service does not fit locally, and then only as a target
    for the whole service (whole-service delegation).
    """

    manifest = PluginManifest(
        name="placement-executive",
        wants_publish=("service.#",),
        wants_subscribe=("service.#",),
        executive="PLACEMENT",
    )

    def __init__(
        self,
        local_view_provider: Callable[[], list[PopView]],
        pseudo_view_provider: Optional[Callable[[], list[PopView]]] = None,
    ):
        super().__init__()
        self.handles = _HandleRegistry()
        self._local_views = local_view_provider
        self._pseudo_views = pseudo_view_provider or (lambda: [])
        self._policies: dict[str, TopologyPolicy] = {}
        self._fault: Optional[Callable[[], bool]] = None

    def on_connect(self) -> None:
        self.subscribe(wire.PLACEMENT_REQUEST, self._on_request)

    def set_topology_policy(self, service_key: str, policy: TopologyPolicy) -> None:
        self._policies[service_key] = policy

    def set_fault_injector(self, fault: Optional[Callable[[], bool]]) -> None:
        """Test hook: when `fault()` is true a request fails deterministically."""
        self._fault = fault

    def onboard(self, program: dsl.SsmProgram, service_key: str) -> SsmHandle:
        if program.kind is not dsl.ProgramKind.PLACEMENT:
            raise ProbeFailed("placement executive only hosts placement programs")
        return self.handles.onboard(program, service_key)

    # -- request handling --------------------------------------------------

    def _on_request(self, message: Message) -> None:
        payload = message.payload or {}
        try:
            if self._fault is not None and self._fault():
                raise NoFeasiblePoP(payload.get("units", [{}])[0].get("vnf", "?"))
            result = self.place(
                service_key=payload.get("service", ""),
                units=[
                    PlacementUnit(u["vnf"], Resources.from_dict(u["resources"]))
                    for u in payload.get("units", [])
                ],
                restriction=payload.get("restriction"),
                service_uid=payload.get("service_uid", ""),
            )
            self.respond(message, {"ok": True, **result})
        except PlatformError as exc:
            self.respond(message, {"ok": False, "error": type(exc).__name__, "detail": str(exc)})

    def place(
        self,
        service_key: str,
        units: list[PlacementUnit],
        restriction: Optional[list[str]] = None,
        service_uid: str = "",
    ) -> dict:
        local = filter_topology(
            self._local_views(), self._policies.get(service_key, TopologyPolicy())
        )
        pseudo = list(self._pseudo_views())
        if restriction:
            allowed = set(restriction)
            local = [p for p in local if p.pop_id in allowed]
            pseudo = [p for p in pseudo if p.pop_id in allowed]

        strategy = self.handles.service_handle(service_key)
        audit_id = service_uid or service_key.replace(".", "-")

        def try_local() -> Optional[list[str]]:
            if not local:
                return None
            try:
                if strategy is not None:
                    self._audit(audit_id, "request", {"pops": [p.pop_id for p in local]})
                    placement = plan_placement(strategy, units, local)
                    self._audit(audit_id, "response", {"placement": placement})
                    return placement
                return plan_placement(None, units, local)
            except NoFeasiblePoP:
                return None
            except dsl.DslError as exc:
                # A misbehaving strategy is never fatal: fall back to the
                # platform default (feasibility re-check by priority order).
                log.warning("placement strategy for %s failed: %s", service_key, exc)
                try:
                    return plan_placement(None, units, local)
                except NoFeasiblePoP:
                    return None

        placement = try_local()
        if placement is not None:
            return {"placement": placement, "delegated_to": None}

        total = Resources()
        for unit in units:
            total = total + unit.resources
        for pop in sorted(pseudo, key=lambda p: p.pop_id):
            if total.fits_within(pop.free()):
                return {
                    "placement": [pop.pop_id for _ in units],
                    "delegated_to": pop.pseudo_child_id,
                }
        raise NoFeasiblePoP(units[0].vnf_name if units else "?")

    def _audit(self, service_uid: str, suffix: str, payload: dict) -> None:
        self.publish(wire.placement_ssm_topic(_topic_safe(service_uid), suffix), payload)


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingDecision:
    """Either a no-op or a replica target for one function of one instance."""

    noop: bool
    target: int = 0
    tier: int = TIER_DEFAULT
    rule_index: int = -1


@dataclass(frozen=True)
class FiringRecord:
    tick: int
    instance_id: str
    vnf_name: str
    previous: int
    target: int
    tier: int
    rule_index: int


@dataclass(frozen=True)
class InstanceScalingView:
    """What the scaling executive needs to know about one running instance."""

    instance_id: str
    service_key: str
    vnf_replicas: dict[str, int]
    function_instances: dict[str, list[str]]  # vnf name -> function instance ids


def evaluate_scaling_program(
    program: dsl.SsmProgram, env: ScalingEnvironment, max_replicas: int
) -> ScalingDecision:
    fired = dsl.evaluate_scaling(program, env)
    if fired is None:
        return ScalingDecision(noop=True)
    action = fired.action
    if isinstance(action, dsl.Noop):
        return ScalingDecision(noop=True, rule_index=fired.rule_index)
    if isinstance(action, dsl.ReplicaDelta):
        raw = env.replicas + action.delta
    else:
        assert fired.set_value is not None
        raw = int(fired.set_value)
    target = min(max_replicas, max(1, raw))
    if target == env.replicas:
        return ScalingDecision(noop=True, rule_index=fired.rule_index)
    return ScalingDecision(noop=False, target=target, rule_index=fired.rule_index)


class ScalingExecutive(BasePlugin):
    """Hosts scaling strategies and drives them from the monitoring stream.

    Subscribes to the metric tree to maintain sliding windows and evaluates
    every running instance on each infrastructure clock tick, requesting
    replica changes from the lifecycle manager when a strategy fires.
    """

    manifest = PluginManifest(
        name="scaling-executive",
        wants_publish=("service.#",),
        wants_subscribe=("function.monitoring.#", "infrastructure.clock.tick", "service.#"),
        executive="SCALING",
    )

    #: Samples older than this are pruned from the sliding windows.
    WINDOW_RETENTION_S = 600.0

    def __init__(
        self,
        instances_provider: Callable[[], list[InstanceScalingView]],
        max_replicas: int = 5,
        request_timeout: float = 10.0,
    ):
        super().__init__()
        self.handles = _HandleRegistry()
        self.max_replicas = max_replicas
        self.request_timeout = request_timeout
        self._instances = instances_provider
        self._default_program = dsl.parse_ssm(DEFAULT_SCALING_SOURCE, dsl.ProgramKind.SCALING)
        self._windows: dict[tuple[str, str], list[tuple[float, float]]] = {}
        self._lock = threading.RLock()
        self.firings: list[FiringRecord] = []

    def on_connect(self) -> None:
        self.subscribe(f"{wire.MONITORING_PREFIX}.#", self._on_metric)
        self.subscribe(wire.CLOCK_TICK, self._on_tick)

    def onboard(
        self, program: dsl.SsmProgram, service_key: str, scope_vnf: Optional[str] = None
    ) -> SsmHandle:
        if program.kind is not dsl.ProgramKind.SCALING:
            raise ProbeFailed("scaling executive only hosts scaling programs")
        return self.handles.onboard(program, service_key, scope_vnf)

    # -- monitoring stream ----------------------------------------------------

    def _on_metric(self, message: Message) -> None:
        parts = message.topic.split(".")
        if len(parts) < 4:
            return
        instance_id, metric = parts[2], parts[3]
        payload = message.payload or {}
        sample = (float(payload.get("timestamp", 0.0)), float(payload.get("value", 0.0)))
        with self._lock:
            window = self._windows.setdefault((instance_id, metric), [])
            window.append(sample)
            cutoff = sample[0] - self.WINDOW_RETENTION_S
            while window and window[0][0] < cutoff:
                window.pop(0)

    def window_for(
        self, function_instance_ids: list[str], metric: str
    ) -> list[tuple[float, float]]:
        with self._lock:
            merged: list[tuple[float, float]] = []
            for fid in function_instance_ids:
                merged.extend(self._windows.get((fid, metric), []))
        merged.sort(key=lambda s: s[0])
        return merged

    # -- decisions ----------------------------------------------------------------

    def _on_tick(self, message: Message) -> None:
        payload = message.payload or {}
        now = float(payload.get("timestamp", 0.0))
        tick = int(payload.get("tick", 0))
        for view in self._instances():
            for vnf_name, replicas in view.vnf_replicas.items():
                decision = self.decide(view, vnf_name, now)
                if decision.noop or decision.target == replicas:
                    continue
                record = FiringRecord(
                    tick=tick,
                    instance_id=view.instance_id,
                    vnf_name=vnf_name,
                    previous=replicas,
                    target=decision.target,
                    tier=decision.tier,
                    rule_index=decision.rule_index,
                )
                with self._lock:
                    self.firings.append(record)
                self._audit(view.instance_id, "response", {
                    "vnf": vnf_name, "target": decision.target, "tier": decision.tier,
                })
                try:
                    self.request(
                        wire.SERVICE_SCALE,
                        {
                            "instance_id": view.instance_id,
                            "vnf": vnf_name,
                            "target": decision.target,
                        },
                        timeout=self.request_timeout,
                    )
                except PlatformError as exc:
                    log.warning("scale request failed for %s: %s", view.instance_id, exc)

    def decide(self, view: InstanceScalingView, vnf_name: str, now: float) -> ScalingDecision:
        """Evaluates all applicable strategies for one function and resolves
        conflicts by tier priority."""
        replicas = view.vnf_replicas[vnf_name]
        fids = view.function_instances.get(vnf_name, [])
        metrics = {m for (fid, m) in self._windows if fid in set(fids)}
        env = ScalingEnvironment(
            windows={m: self.window_for(fids, m) for m in metrics},
            now=now,
            replicas=replicas,
        )
        candidates: list[DecisionCandidate] = []
        service_handle = self.handles.service_handle(view.service_key)
        if service_handle is not None:
            candidates.append(
                DecisionCandidate(
                    TIER_SSM,
                    service_handle.onboard_seq,
                    self._evaluate(service_handle.program, env, TIER_SSM),
                )
            )
        fsm_handle = self.handles.vnf_handle(view.service_key, vnf_name)
        if fsm_handle is not None:
            candidates.append(
                DecisionCandidate(
                    TIER_FSM,
                    fsm_handle.onboard_seq,
                    self._evaluate(fsm_handle.program, env, TIER_FSM),
                )
            )
        candidates.append(
            DecisionCandidate(
                TIER_DEFAULT, 10**9, self._evaluate(self._default_program, env, TIER_DEFAULT)
            )
        )

        def feasible(decision: object) -> bool:
            assert isinstance(decision, ScalingDecision)
            # A strategy that did not fire yields no decision and falls
            # through; the final default no-op is always feasible.
            return (not decision.noop) or decision.rule_index >= 0 or decision.tier == TIER_DEFAULT

        resolved = resolve_conflict(candidates, feasible)
        assert isinstance(resolved, ScalingDecision)
        return resolved

    def _evaluate(
        self, program: dsl.SsmProgram, env: ScalingEnvironment, tier: int
    ) -> ScalingDecision:
        try:
            decision = evaluate_scaling_program(program, env, self.max_replicas)
            return replace(decision, tier=tier)
        except dsl.DslError as exc:
            log.warning("scaling strategy error: %s", exc)
            return ScalingDecision(noop=True, tier=tier)

    def _audit(self, instance_id: str, suffix: str, payload: dict) -> None:
        self.publish(wire.scaling_ssm_topic(_topic_safe(instance_id), suffix), payload)


def _topic_safe(text: str) -> str:
    out = "".join(c if (c.isalnum() and c.isascii()) or c in "_-" else "-" for c in text.lower())
    return out or "unknown"
