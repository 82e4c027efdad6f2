"""Reference wire-format fixtures.

One object of every protocol type, built from fixed seeds under the
deterministic scheme, so the canonical binary encoding can be pinned
byte-for-byte and diffed across implementations.
"""

from __future__ import annotations

from .crypto import KEYED_HASH, issue_certificate, sha256
from .ledger import Block, genesis
from .market import build_access_tx, build_data_request, create_contract
from .txmodel import (
    GRANT_CONTRACT_REF,
    GeoPoint,
    Grant,
    Payload,
    ROAD_DAMAGE,
    Scope,
    build_data_tx,
    build_rsi_tx,
)

FIXTURE_NAMES = (
    "data_transaction",
    "rsi_transaction",
    "block",
    "certificate",
    "smart_contract",
    "access_transaction",
    "data_request_transaction",
)


def _key(label: str):
    return KEYED_HASH.generate_keypair(sha256(b"dmap/fixture/" + label.encode()))


def make_fixture_objects() -> dict[str, object]:
    scheme = KEYED_HASH
    ca = _key("ca")
    rsi = _key("rsi")
    vehicle_a = _key("vehicle-a")
    vehicle_b = _key("vehicle-b")
    owner = _key("owner")
    sp = _key("sp")

    loc = GeoPoint(lat_micro=52_520_000, lon_micro=13_405_000)
    data_tx = build_data_tx(scheme, vehicle_a, loc, ROAD_DAMAGE, 42_000)
    data_tx_b = build_data_tx(scheme, vehicle_b, loc, ROAD_DAMAGE, 42_000)

    payload = Payload(loc=loc, event=ROAD_DAMAGE, timestamp=42_000)
    rsi_tx = build_rsi_tx(scheme, rsi, payload,
                          [(data_tx.pk, data_tx.vehicle_sign),
                           (data_tx_b.pk, data_tx_b.vehicle_sign)], flag=1)

    chain = genesis("r0_c0")
    block = Block.make(height=1, prev_hash=chain.tip.block_hash,
                       timestamp=45_000, txs=(rsi_tx,))

    cert = issue_certificate(scheme, ca, rsi.public, "r0_c0")

    scope = Scope(region_ids=("r0_c0", "r0_c1"), from_ms=0, to_ms=600_000,
                  kind_codes=(0, 3))
    contract = create_contract(scheme, owner, sp.public, (10_000, 500_000),
                               scope, price=7)

    query = Scope(region_ids=("r0_c0",), from_ms=0, to_ms=120_000,
                  kind_codes=(0,))
    grant = Grant(kind=GRANT_CONTRACT_REF, contract_id=contract.contract_id())
    access_tx = build_access_tx(scheme, sp, query, grant)

    request = build_data_request(scheme, sp,
                                 GeoPoint(52_000_000, 13_000_000),
                                 GeoPoint(53_000_000, 14_000_000),
                                 0, 600_000, ["r0_c0", "r0_c1"])
    return {
        "data_transaction": data_tx,
        "rsi_transaction": rsi_tx,
        "block": block,
        "certificate": cert,
        "smart_contract": contract,
        "access_transaction": access_tx,
        "data_request_transaction": request,
    }
