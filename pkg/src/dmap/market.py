"""Data marketplace: per-RSI data directories in a cloud store, the rule
table mediating between chain and store, smart-contract grants, and
double-signed access transactions.

The rule table holds its own CA-certified keypair: a data access is only
served once the requester's transaction carries both the requester's
signature and the rule table's countersignature, and that final form is
chained on the ledger of the region whose directory served the request.

Store-side search is an in-process inverted index over (location cell,
time bucket, event kind); external search services are deliberately not
used.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .crypto import Certificate, KeyPair, SignatureScheme, sha256, verify_certificate
from .encoding import Writer, canonical_encode
from .ledger import Ledger, MinerPolicy, append_block
from .txmodel import (
    AccessTransaction,
    DataRequestTransaction,
    GeoPoint,
    Grant,
    GRANT_CONTRACT_REF,
    GRANT_OWNER_SIG,
    Payload,
    RangeError,
    RsiTransaction,
    Scope,
    SmartContract,
    access_requester_signing_bytes,
    access_ruletable_signing_bytes,
    contract_signing_bytes,
    data_request_signing_bytes,
    grant_signing_bytes,
)

INDEX_CELL_M = 500.0
INDEX_BUCKET_MS = 60_000
METERS_PER_DEGREE = 111_320.0


class CertError(ValueError):
    """Directory registration with an invalid certificate."""


class AlreadyRegistered(ValueError):
    pass


class UnknownRsi(ValueError):
    pass


class NotChained(ValueError):
    """Storage refused: the aggregate is not on its region's ledger."""


class FlagRejected(ValueError):
    """Storage refused: only flag=1 data is ever stored."""


class TargetError(ValueError):
    """Degenerate request area or empty target region set."""


DENY_NO_GRANT = "NoGrant"
DENY_EXPIRED = "Expired"
DENY_SCOPE_EXCEEDED = "ScopeExceeded"
DENY_BAD_SIGNATURE = "BadSignature"


@dataclass(frozen=True)
class Record:
    record_id: int
    region_id: str
    payload: Payload
    provenance: bytes            # digest of the chained aggregate
    owner_pks: tuple[bytes, ...]
    size_bytes: int


def _payload_size(payload: Payload) -> int:
    w = Writer()
    from .txmodel import _encode_payload  # same bytes the wire format uses

    _encode_payload(payload, w)
    return len(w.getvalue())


def _index_key(payload: Payload) -> tuple[int, int, int]:
    y = payload.loc.lat_micro / 1e6 * METERS_PER_DEGREE
    x = payload.loc.lon_micro / 1e6 * METERS_PER_DEGREE
    return (math.floor(y / INDEX_CELL_M), math.floor(x / INDEX_CELL_M),
            payload.timestamp // INDEX_BUCKET_MS)


@dataclass
class DataDirectory:
    region_id: str
    records: list[Record] = field(default_factory=list)
    # (cell_row, cell_col, bucket, kind_code) -> record ids
    index: dict[tuple[int, int, int, int], list[int]] = field(default_factory=dict)

    def add(self, record: Record) -> None:
        self.records.append(record)
        row, col, bucket = _index_key(record.payload)
        key = (row, col, bucket, record.payload.event.code)
        self.index.setdefault(key, []).append(record.record_id)


@dataclass
class AccessResult:
    granted: bool
    reason: str = ""
    records: list[Record] = field(default_factory=list)
    access_tx: AccessTransaction | None = None

    @classmethod
    def denied(cls, reason: str) -> "AccessResult":
        return cls(granted=False, reason=reason)


def create_contract(scheme: SignatureScheme, owner_key: KeyPair,
                    grantee_pk: bytes, timespan: tuple[int, int],
                    scope: Scope, price: int) -> SmartContract:
    """Sign a time-bounded grant; caller chains it before first use."""
    start_ms, end_ms = timespan
    if start_ms >= end_ms:
        raise RangeError("timespan must be a non-empty [start, end) interval")
    if scope.from_ms > scope.to_ms:
        raise RangeError("scope period must satisfy from <= to")
    if price < 0:
        raise RangeError("price must be non-negative")
    sig = scheme.sign(owner_key.secret,
                      contract_signing_bytes(owner_key.public, grantee_pk,
                                             start_ms, end_ms, scope, price))
    return SmartContract(owner_pk=owner_key.public, grantee_pk=grantee_pk,
                         start_ms=start_ms, end_ms=end_ms, scope=scope,
                         price=price, owner_sign=sig)


def build_access_tx(scheme: SignatureScheme, requester_key: KeyPair,
                    query: Scope, grant: Grant) -> AccessTransaction:
    sig = scheme.sign(requester_key.secret,
                      access_requester_signing_bytes(requester_key.public,
                                                     query, grant))
    return AccessTransaction(requester_pk=requester_key.public, query=query,
                             grant=grant, requester_sign=sig)


def build_data_request(scheme: SignatureScheme, sp_key: KeyPair,
                       area_min: GeoPoint, area_max: GeoPoint,
                       from_ms: int, to_ms: int,
                       target_regions: list[str]) -> DataRequestTransaction:
    if not target_regions:
        raise TargetError("no target regions")
    if area_min.lat_micro >= area_max.lat_micro or area_min.lon_micro >= area_max.lon_micro:
        raise TargetError("degenerate request area")
    if from_ms > to_ms:
        raise TargetError("period must satisfy from <= to")
    sig = scheme.sign(sp_key.secret,
                      data_request_signing_bytes(sp_key.public, area_min,
                                                 area_max, from_ms, to_ms))
    return DataRequestTransaction(sp_pk=sp_key.public, area_min=area_min,
                                  area_max=area_max, from_ms=from_ms,
                                  to_ms=to_ms, sp_sign=sig)


class RuleTable:
    """The store/retrieve mediator; serializes all mutations per directory."""

    def __init__(self, scheme: SignatureScheme, key: KeyPair,
                 ca_pk: bytes, policy: MinerPolicy,
                 ledgers: dict[str, Ledger]) -> None:
        self.scheme = scheme
        self.key = key
        self.ca_pk = ca_pk
        self.policy = policy
        self.ledgers = ledgers
        self.directories: dict[str, DataDirectory] = {}
        self._next_record_id = 0

    # -- storage path --------------------------------------------------------

    def register_rsi_directory(self, cert: Certificate) -> DataDirectory:
        if not verify_certificate(self.scheme, self.ca_pk, cert):
            raise CertError("certificate does not verify under the CA key")
        if cert.region_id in self.directories:
            raise AlreadyRegistered(cert.region_id)
        directory = DataDirectory(region_id=cert.region_id)
        self.directories[cert.region_id] = directory
        return directory

    def store_record(self, rsi_tx: RsiTransaction) -> int:
        if rsi_tx.flag != 1:
            raise FlagRejected("only flag=1 aggregates are stored")
        cert = self.policy.cert_registry.get(rsi_tx.rsi_pk)
        if cert is None or cert.region_id not in self.directories:
            raise UnknownRsi("no directory for this RSI key")
        region = cert.region_id
        digest = sha256(canonical_encode(rsi_tx))
        if not self._tx_on_chain(region, digest):
            raise NotChained("aggregate not found on its region's ledger")
        record = Record(record_id=self._next_record_id, region_id=region,
                        payload=rsi_tx.payload, provenance=digest,
                        owner_pks=tuple(rsi_tx.vehicle_pks),
                        size_bytes=_payload_size(rsi_tx.payload))
        self._next_record_id += 1
        self.directories[region].add(record)
        return record.record_id

    def _tx_on_chain(self, region: str, digest: bytes) -> bool:
        ledger = self.ledgers.get(region)
        if ledger is None:
            return False
        for tx in ledger.all_txs():
            if sha256(canonical_encode(tx)) == digest:
                return True
        return False

    # -- retrieval path ------------------------------------------------------

    def find_contract(self, contract_id: bytes) -> SmartContract | None:
        for ledger in self.ledgers.values():
            for tx in ledger.all_txs():
                if isinstance(tx, SmartContract) and tx.contract_id() == contract_id:
                    return tx
        return None

    def evaluate_access(self, access_tx: AccessTransaction,
                        now_ms: int) -> AccessResult:
        """Grant or deny one access; on grant, countersign, serve the
        matching records, and chain the double-signed transaction."""
        req_msg = access_requester_signing_bytes(access_tx.requester_pk,
                                                 access_tx.query, access_tx.grant)
        if not self.scheme.verify(access_tx.requester_pk, req_msg,
                                  access_tx.requester_sign):
            return AccessResult.denied(DENY_BAD_SIGNATURE)

        grant = access_tx.grant
        if grant.kind == GRANT_CONTRACT_REF:
            contract = self.find_contract(grant.contract_id)
            if contract is None or contract.grantee_pk != access_tx.requester_pk:
                return AccessResult.denied(DENY_NO_GRANT)
            if not contract.start_ms <= now_ms < contract.end_ms:
                return AccessResult.denied(DENY_EXPIRED)
            if not contract.scope.contains_query(access_tx.query):
                return AccessResult.denied(DENY_SCOPE_EXCEEDED)
            records = self._matching_records(access_tx.query)
        elif grant.kind == GRANT_OWNER_SIG:
            msg = grant_signing_bytes(access_tx.requester_pk, access_tx.query)
            if not self.scheme.verify(grant.owner_pk, msg, grant.owner_sign):
                return AccessResult.denied(DENY_BAD_SIGNATURE)
            records = [r for r in self._matching_records(access_tx.query)
                       if grant.owner_pk in r.owner_pks]
        else:
            return AccessResult.denied(DENY_NO_GRANT)

        approved = AccessTransaction(
            requester_pk=access_tx.requester_pk, query=access_tx.query,
            grant=access_tx.grant, requester_sign=access_tx.requester_sign,
            ruletable_pk=self.key.public, ruletable_sign=b"")
        sig = self.scheme.sign(self.key.secret,
                               access_ruletable_signing_bytes(approved))
        approved = AccessTransaction(
            requester_pk=approved.requester_pk, query=approved.query,
            grant=approved.grant, requester_sign=approved.requester_sign,
            ruletable_pk=self.key.public, ruletable_sign=sig)
        self._chain_access_tx(approved, records, now_ms)
        return AccessResult(granted=True, records=records, access_tx=approved)

    def _matching_records(self, query: Scope) -> list[Record]:
        out = []
        for rid in sorted(query.region_ids):
            directory = self.directories.get(rid)
            if directory is None:
                continue
            for r in directory.records:
                if (query.from_ms <= r.payload.timestamp < query.to_ms
                        and r.payload.event.code in query.kind_codes):
                    out.append(r)
        return out

    def _serving_region(self, records: list[Record], query: Scope) -> str:
        if records:
            return min(r.region_id for r in records)
        for rid in sorted(query.region_ids):
            if rid in self.ledgers:
                return rid
        return min(self.ledgers)

    def _chain_access_tx(self, tx: AccessTransaction, records: list[Record],
                         now_ms: int) -> None:
        region = self._serving_region(records, tx.query)
        append_block(self.scheme, self.ledgers[region], [tx], now_ms, self.policy)

    def chain_contract(self, contract: SmartContract, now_ms: int) -> bytes:
        """Store a grant on-chain (ledger of its first in-scope region)."""
        candidates = [r for r in sorted(contract.scope.region_ids)
                      if r in self.ledgers]
        region = candidates[0] if candidates else min(self.ledgers)
        append_block(self.scheme, self.ledgers[region], [contract],
                     now_ms, self.policy)
        return contract.contract_id()

    # -- discovery -----------------------------------------------------------

    def query_availability(self, area_min: GeoPoint, area_max: GeoPoint,
                           from_ms: int, to_ms: int) -> tuple[int, int]:
        """Exact (record count, byte volume) in an area/period; no payloads."""
        count = 0
        volume = 0
        for directory in self.directories.values():
            for key, rids in directory.index.items():
                row, col, bucket, _kind = key
                if not self._cell_may_intersect(row, col, bucket,
                                                area_min, area_max,
                                                from_ms, to_ms):
                    continue
                for rid in rids:
                    r = directory.records[self._local_index(directory, rid)]
                    if self._in_area(r.payload, area_min, area_max, from_ms, to_ms):
                        count += 1
                        volume += r.size_bytes
        return count, volume

    @staticmethod
    def _local_index(directory: DataDirectory, record_id: int) -> int:
        # records keep global ids; directories append in id order
        lo, hi = 0, len(directory.records)
        while lo < hi:
            mid = (lo + hi) // 2
            if directory.records[mid].record_id < record_id:
                lo = mid + 1
            else:
                hi = mid
        return lo

    @staticmethod
    def _cell_may_intersect(row: int, col: int, bucket: int,
                            area_min: GeoPoint, area_max: GeoPoint,
                            from_ms: int, to_ms: int) -> bool:
        if (bucket + 1) * INDEX_BUCKET_MS <= from_ms or bucket * INDEX_BUCKET_MS >= to_ms:
            return False
        y_min = area_min.lat_micro / 1e6 * METERS_PER_DEGREE
        y_max = area_max.lat_micro / 1e6 * METERS_PER_DEGREE
        x_min = area_min.lon_micro / 1e6 * METERS_PER_DEGREE
        x_max = area_max.lon_micro / 1e6 * METERS_PER_DEGREE
        if (row + 1) * INDEX_CELL_M < y_min or row * INDEX_CELL_M > y_max:
            return False
        if (col + 1) * INDEX_CELL_M < x_min or col * INDEX_CELL_M > x_max:
            return False
        return True

    @staticmethod
    def _in_area(payload: Payload, area_min: GeoPoint, area_max: GeoPoint,
                 from_ms: int, to_ms: int) -> bool:
        return (area_min.lat_micro <= payload.loc.lat_micro <= area_max.lat_micro
                and area_min.lon_micro <= payload.loc.lon_micro <= area_max.lon_micro
                and from_ms <= payload.timestamp < to_ms)


def export_records(directory: DataDirectory) -> str:
    """One JSON object per line, the store's bulk export format."""
    lines = []
    for r in directory.records:
        obj = {
            "loc": {"lat": r.payload.loc.lat_micro / 1e6,
                    "lon": r.payload.loc.lon_micro / 1e6},
            "event": r.payload.event.name,
            "timestamp": r.payload.timestamp,
            "provenance": r.provenance.hex(),
        }
        if r.payload.event.code == 2:
            obj["speed_kmh"] = r.payload.event.speed_kmh
        lines.append(json.dumps(obj, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")
