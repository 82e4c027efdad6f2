"""RSI-side validation: windowed ingestion, neighbor-monitoring
clustering, flag assignment, and deduplicated aggregation.

Reports arriving within one validation window are clustered by
compatibility (same event kind, locations within `eps_distance`,
timestamps within `eps_time`, closed under single linkage). Clusters
whose payloads conflict inside one spatial cell are judged against each
other: the plurality wins, divergent minorities are discarded, and
uncorroborated singletons go out flagged untrusted so miners reject them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .crypto import KeyPair, SignatureScheme
from .txmodel import (
    DataTransaction,
    Payload,
    RsiTransaction,
    build_rsi_tx,
    canonical_encode,
    cell_of,
    distance_m,
    verify_data_tx,
)


@dataclass
class ConsistencyPolicy:
    eps_distance: float      # metres, max location spread within a cluster
    eps_time: int            # ms, max timestamp spread
    min_corroboration: int   # reports needed for flag = 1

    def __post_init__(self) -> None:
        if self.eps_distance <= 0 or self.eps_time <= 0:
            raise ValueError("eps parameters must be positive")
        if self.min_corroboration < 2:
            raise ValueError("min_corroboration must be >= 2")


class ClusterStatus(Enum):
    TRUSTED = "Trusted"
    LONE_REPORT = "LoneReport"
    REJECTED_MINORITY = "RejectedMinority"


@dataclass
class ClusterVerdict:
    payload: Payload
    members: list[tuple[bytes, bytes]]  # (pk, sign), sorted by pk
    status: ClusterStatus
    reports: list[DataTransaction]


@dataclass
class ValidationWindow:
    window_id: int
    opens_at: int
    closes_at: int
    reports: list[DataTransaction] = field(default_factory=list)


@dataclass
class RegionStats:
    reports_sent: int = 0
    sig_rejects: int = 0
    stale: int = 0
    rejected_reports: int = 0
    lone_reports: int = 0
    trusted_tx: int = 0
    lone_tx: int = 0
    trusted_members: int = 0
    lone_members: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(sorted(vars(self).items()))


@dataclass
class RsiState:
    region_id: str
    key: KeyPair
    window: ValidationWindow
    window_ms: int
    stats: RegionStats = field(default_factory=RegionStats)

    @classmethod
    def fresh(cls, region_id: str, key: KeyPair, window_ms: int) -> "RsiState":
        return cls(region_id=region_id, key=key,
                   window=ValidationWindow(0, 0, window_ms),
                   window_ms=window_ms)


def ingest(scheme: SignatureScheme, rsi: RsiState, tx: DataTransaction,
           now: int) -> bool:
    """Buffer a vehicle report into the open window; returns False if dropped."""
    rsi.stats.reports_sent += 1
    if not verify_data_tx(scheme, tx):
        rsi.stats.sig_rejects += 1
        return False
    w = rsi.window
    if not w.opens_at <= tx.timestamp < w.closes_at:
        rsi.stats.stale += 1
        return False
    w.reports.append(tx)
    return True


def _compatible(a: DataTransaction, b: DataTransaction,
                policy: ConsistencyPolicy) -> bool:
    return (a.event == b.event
            and abs(a.timestamp - b.timestamp) <= policy.eps_time
            and distance_m(a.loc, b.loc) <= policy.eps_distance)


def cluster_reports(reports: list[DataTransaction],
                    policy: ConsistencyPolicy) -> list[list[DataTransaction]]:
    """Partition reports into connected components of the compatibility graph."""
    n = len(reports)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if _compatible(reports[i], reports[j], policy):
                parent[find(i)] = find(j)

    groups: dict[int, list[DataTransaction]] = {}
    for i, r in enumerate(reports):
        groups.setdefault(find(i), []).append(r)
    # deterministic order: by medoid-independent cluster fingerprint
    clusters = list(groups.values())
    clusters.sort(key=lambda c: min(canonical_encode(r) for r in c))
    return clusters


def _medoid(cluster: list[DataTransaction]) -> DataTransaction:
    """Report with minimum summed distance to the cluster; canonical-byte
    order breaks ties."""
    def key(r: DataTransaction) -> tuple[float, bytes]:
        total = sum(distance_m(r.loc, o.loc) for o in cluster)
        return (total, canonical_encode(r))

    return min(cluster, key=key)


def judge_clusters(clusters: list[list[DataTransaction]],
                   policy: ConsistencyPolicy) -> list[ClusterVerdict]:
    """Trust pluralities, discard divergent minorities, flag loners.

    Clusters conflict when their payloads land in the same
    eps-distance-sized spatial cell but claim different event kinds.
    Within such a locus the unique largest cluster is the plurality; an
    exact size tie across kinds means no plurality exists and the tied
    clusters are merely uncorroborated.
    """
    verdicts: list[ClusterVerdict] = []
    prepared = []
    for c in clusters:
        med = _medoid(c)
        payload = Payload(loc=med.loc, event=med.event, timestamp=med.timestamp)
        prepared.append((payload, c))

    by_cell: dict[tuple[int, int], list[int]] = {}
    for idx, (payload, _) in enumerate(prepared):
        by_cell.setdefault(cell_of(payload.loc, policy.eps_distance), []).append(idx)

    status: dict[int, ClusterStatus] = {}
    for indices in by_cell.values():
        kinds = {prepared[i][0].event for i in indices}
        if len(kinds) == 1:
            for i in indices:
                size = len(prepared[i][1])
                status[i] = (ClusterStatus.TRUSTED
                             if size >= policy.min_corroboration
                             else ClusterStatus.LONE_REPORT)
            continue
        max_size = max(len(prepared[i][1]) for i in indices)
        top = [i for i in indices if len(prepared[i][1]) == max_size]
        top_kinds = {prepared[i][0].event for i in top}
        if len(top_kinds) > 1:
            # no plurality: tied clusters are lone, the rest lost a conflict
            for i in indices:
                status[i] = (ClusterStatus.LONE_REPORT if i in top
                             else ClusterStatus.REJECTED_MINORITY)
            continue
        winner_kind = next(iter(top_kinds))
        for i in indices:
            payload, cluster = prepared[i]
            if payload.event != winner_kind:
                status[i] = ClusterStatus.REJECTED_MINORITY
            else:
                status[i] = (ClusterStatus.TRUSTED
                             if len(cluster) >= policy.min_corroboration
                             else ClusterStatus.LONE_REPORT)

    for idx, (payload, cluster) in enumerate(prepared):
        members = sorted(((r.pk, r.vehicle_sign) for r in cluster),
                         key=lambda m: m[0])
        verdicts.append(ClusterVerdict(payload=payload, members=members,
                                       status=status[idx], reports=cluster))
    return verdicts


def _exact_payload_groups(reports: list[DataTransaction]
                          ) -> list[list[DataTransaction]]:
    groups: dict[tuple, list[DataTransaction]] = {}
    for r in reports:
        key = (r.loc.lat_micro, r.loc.lon_micro, r.event.code,
               r.event.speed_kmh, r.timestamp)
        groups.setdefault(key, []).append(r)
    return sorted(groups.values(), key=lambda g: (-len(g), g[0].loc.lat_micro,
                                                  g[0].loc.lon_micro,
                                                  g[0].timestamp))


def close_window(scheme: SignatureScheme, rsi: RsiState,
                 policy: ConsistencyPolicy) -> list[RsiTransaction]:
    """Judge the closing window and emit one aggregate per surviving cluster.

    Trusted clusters go out flag=1 with one deduplicated payload and every
    member signature; lone reports go out flag=0 (miners will reject
    them); divergent minorities are dropped and counted. Opens the next
    window before returning.

    Member signatures were made over the members' own report bytes, so an
    aggregate is only independently verifiable when every carried member
    signed exactly the deduplicated payload. Within a surviving cluster
    the exact-payload plurality is aggregated; compatible-but-divergent
    leftovers cannot be carried verifiably and are counted rejected.
    """
    clusters = cluster_reports(rsi.window.reports, policy)
    verdicts = judge_clusters(clusters, policy)
    txs: list[RsiTransaction] = []
    for v in verdicts:
        if v.status is ClusterStatus.REJECTED_MINORITY:
            rsi.stats.rejected_reports += len(v.reports)
            continue
        exact = _exact_payload_groups(v.reports)
        carried = exact[0]
        payload = Payload(loc=carried[0].loc, event=carried[0].event,
                          timestamp=carried[0].timestamp)
        members = sorted(((r.pk, r.vehicle_sign) for r in carried),
                         key=lambda m: m[0])
        rsi.stats.rejected_reports += len(v.reports) - len(carried)
        if v.status is ClusterStatus.TRUSTED and len(carried) >= policy.min_corroboration:
            txs.append(build_rsi_tx(scheme, rsi.key, payload, members, flag=1))
            rsi.stats.trusted_tx += 1
            rsi.stats.trusted_members += len(members)
        else:
            txs.append(build_rsi_tx(scheme, rsi.key, payload, members, flag=0))
            rsi.stats.lone_tx += 1
            rsi.stats.lone_reports += 1
            rsi.stats.lone_members += len(members)
    w = rsi.window
    rsi.window = ValidationWindow(window_id=w.window_id + 1,
                                  opens_at=w.closes_at,
                                  closes_at=w.closes_at + rsi.window_ms)
    txs.sort(key=canonical_encode)
    return txs


def handover(vehicle, to_region: str, rsis: dict[str, RsiState]) -> None:
    """Soft handover: the new association takes effect at the next window
    boundary; until then in-flight reports keep flowing to the old RSI.

    A vehicle entering a region with no certified RSI buffers locally
    until it next reaches covered ground.
    """
    if to_region == vehicle.assoc_region:
        vehicle.pending_region = None
        return
    if to_region in rsis:
        vehicle.pending_region = to_region
        vehicle.buffering = False
    else:
        vehicle.pending_region = None
        vehicle.buffering = True
