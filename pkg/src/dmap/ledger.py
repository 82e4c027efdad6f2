"""Per-RSI hash-chained append-only ledgers.

Block production rights are certificate-based: the RSI certified for a
region produces that region's blocks, and everyone else replay-verifies.
A block commits to its contents through `block_hash` and to its
predecessor through `prev_hash`, so any mutation of chained bytes is
detectable by a full rescan.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import encoding
from .crypto import (
    DIGEST_LEN,
    ZERO_DIGEST,
    Certificate,
    SignatureScheme,
    sha256,
    verify_certificate,
)
from .encoding import DecodeError, Reader, Writer
from .txmodel import (
    REJECT_WRONG_LEDGER,
    AccessTransaction,
    RsiTransaction,
    SmartContract,
    Verdict,
    access_requester_signing_bytes,
    access_ruletable_signing_bytes,
    contract_signing_bytes,
    verify_rsi_tx,
)

TAG_BLOCK = 0x03

ChainedTx = RsiTransaction | AccessTransaction | SmartContract

LEDGER_DUMP_MAGIC = b"DMAPLEDG"


class AdmissionError(ValueError):
    """A block was attempted over a transaction miners would reject."""


class EmptyBlockError(ValueError):
    """Empty blocks are never produced."""


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    timestamp: int
    txs: tuple[ChainedTx, ...]
    block_hash: bytes

    @staticmethod
    def compute_hash(height: int, prev_hash: bytes, timestamp: int,
                     txs: tuple[ChainedTx, ...]) -> bytes:
        return sha256(_block_body_bytes(height, prev_hash, timestamp, txs))

    @classmethod
    def make(cls, height: int, prev_hash: bytes, timestamp: int,
             txs: tuple[ChainedTx, ...]) -> "Block":
        return cls(height=height, prev_hash=prev_hash, timestamp=timestamp,
                   txs=txs,
                   block_hash=cls.compute_hash(height, prev_hash, timestamp, txs))


def _block_body_bytes(height: int, prev_hash: bytes, timestamp: int,
                      txs: tuple[ChainedTx, ...]) -> bytes:
    w = Writer()
    w.u64(height)
    w.raw(prev_hash)
    w.u64(timestamp)
    w.u32(len(txs))
    for tx in txs:
        encoding.encode_into(tx, w)
    return w.getvalue()


def _encode_block(b: Block, w: Writer) -> None:
    # block_hash is derived, not stored; decode recomputes it.
    w.raw(_block_body_bytes(b.height, b.prev_hash, b.timestamp, b.txs))


def _decode_block(r: Reader) -> Block:
    height = r.u64()
    prev_hash = r.raw(DIGEST_LEN)
    timestamp = r.u64()
    txs = []
    for _ in range(r.u32()):
        tx = encoding.decode_from(r)
        if not isinstance(tx, (RsiTransaction, AccessTransaction, SmartContract)):
            raise DecodeError(f"{type(tx).__name__} cannot appear in a block")
        txs.append(tx)
    return Block.make(height=height, prev_hash=prev_hash,
                      timestamp=timestamp, txs=tuple(txs))


encoding.register_codec(Block, TAG_BLOCK, _encode_block, _decode_block)


@dataclass
class MinerPolicy:
    m: int  # minimum member-signature count for aggregates
    ca_pk: bytes
    cert_registry: dict[bytes, Certificate] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("m must be >= 1")


@dataclass
class Ledger:
    rsi_region: str
    blocks: list[Block] = field(default_factory=list)

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    def all_txs(self) -> list[ChainedTx]:
        return [tx for b in self.blocks for tx in b.txs]


def genesis(region: str) -> Ledger:
    block = Block.make(height=0, prev_hash=ZERO_DIGEST, timestamp=0, txs=())
    return Ledger(rsi_region=region, blocks=[block])


def miner_admit(scheme: SignatureScheme, tx: ChainedTx, policy: MinerPolicy,
                region: str) -> Verdict:
    """Would miners accept `tx` onto the ledger of `region`?"""
    if isinstance(tx, RsiTransaction):
        cert = policy.cert_registry.get(tx.rsi_pk)
        if cert is not None and cert.region_id != region:
            return Verdict.reject(REJECT_WRONG_LEDGER)
        return verify_rsi_tx(scheme, tx, policy.ca_pk,
                             policy.cert_registry, policy.m)
    if isinstance(tx, AccessTransaction):
        return _admit_access_tx(scheme, tx, policy)
    if isinstance(tx, SmartContract):
        msg = contract_signing_bytes(tx.owner_pk, tx.grantee_pk, tx.start_ms,
                                     tx.end_ms, tx.scope, tx.price)
        if tx.start_ms >= tx.end_ms:
            return Verdict.reject("Malformed")
        if not scheme.verify(tx.owner_pk, msg, tx.owner_sign):
            return Verdict.reject("BadOwnerSignature")
        return Verdict.accept()
    return Verdict.reject("UnknownTxType")


def _admit_access_tx(scheme: SignatureScheme, tx: AccessTransaction,
                     policy: MinerPolicy) -> Verdict:
    # The chained form is multisign: requester plus certified rule table.
    req_msg = access_requester_signing_bytes(tx.requester_pk, tx.query, tx.grant)
    if not scheme.verify(tx.requester_pk, req_msg, tx.requester_sign):
        return Verdict.reject("BadRequesterSignature")
    if not tx.is_approved():
        return Verdict.reject("MissingRuleTableSignature")
    cert = policy.cert_registry.get(tx.ruletable_pk)
    if cert is None or not verify_certificate(scheme, policy.ca_pk, cert):
        return Verdict.reject("UncertifiedRuleTable")
    if not scheme.verify(tx.ruletable_pk, access_ruletable_signing_bytes(tx),
                         tx.ruletable_sign):
        return Verdict.reject("BadRuleTableSignature")
    return Verdict.accept()


def append_block(scheme: SignatureScheme, ledger: Ledger,
                 txs: list[ChainedTx], ts: int, policy: MinerPolicy) -> Block:
    if not txs:
        raise EmptyBlockError("refusing to append an empty block")
    for tx in txs:
        verdict = miner_admit(scheme, tx, policy, ledger.rsi_region)
        if not verdict.accepted:
            raise AdmissionError(f"unadmitted transaction: {verdict.reason}")
    prev = ledger.tip
    block = Block.make(height=prev.height + 1, prev_hash=prev.block_hash,
                       timestamp=ts, txs=tuple(txs))
    ledger.blocks.append(block)
    return block


@dataclass(frozen=True)
class ChainStatus:
    ok: bool
    first_bad_height: int = -1

    @classmethod
    def valid(cls) -> "ChainStatus":
        return cls(True)

    @classmethod
    def tampered(cls, height: int) -> "ChainStatus":
        return cls(False, height)


def validate_chain(ledger: Ledger) -> ChainStatus:
    """Recompute every block hash and link; report the first bad height."""
    prev_hash = ZERO_DIGEST
    for i, b in enumerate(ledger.blocks):
        if b.height != i:
            return ChainStatus.tampered(i)
        if b.prev_hash != prev_hash:
            return ChainStatus.tampered(i)
        recomputed = Block.compute_hash(b.height, b.prev_hash, b.timestamp, b.txs)
        if recomputed != b.block_hash:
            return ChainStatus.tampered(i)
        prev_hash = b.block_hash
    return ChainStatus.valid()


def lookup_access_log(ledger: Ledger, owner_pk: bytes,
                      contract_owners: dict[bytes, bytes] | None = None
                      ) -> list[AccessTransaction]:
    """All chained accesses against data whose grant `owner_pk` issued.

    `contract_owners` maps contract_id to owner key; when omitted it is
    rebuilt from contracts chained on this ledger.
    """
    if contract_owners is None:
        contract_owners = {}
        for tx in ledger.all_txs():
            if isinstance(tx, SmartContract):
                contract_owners[tx.contract_id()] = tx.owner_pk
    out = []
    for tx in ledger.all_txs():
        if not isinstance(tx, AccessTransaction):
            continue
        g = tx.grant
        if g.kind == 1 and g.owner_pk == owner_pk:
            out.append(tx)
        elif g.kind == 0 and contract_owners.get(g.contract_id) == owner_pk:
            out.append(tx)
    return out


# --- dump / load ------------------------------------------------------------

def dump_ledger(ledger: Ledger) -> bytes:
    w = Writer()
    w.raw(LEDGER_DUMP_MAGIC)
    w.string(ledger.rsi_region)
    w.u32(len(ledger.blocks))
    for b in ledger.blocks:
        encoding.encode_into(b, w)
    return w.getvalue()


def load_ledger(data: bytes) -> Ledger:
    r = Reader(data)
    if r.raw(len(LEDGER_DUMP_MAGIC)) != LEDGER_DUMP_MAGIC:
        raise DecodeError("not a ledger dump")
    region = r.string()
    blocks = []
    for _ in range(r.u32()):
        b = encoding.decode_from(r)
        if not isinstance(b, Block):
            raise DecodeError("expected a block")
        blocks.append(b)
    r.expect_eof()
    return Ledger(rsi_region=region, blocks=blocks)


def ledger_to_json(ledger: Ledger) -> str:
    """Human-readable export for debugging; not the canonical format."""
    doc = {
        "region": ledger.rsi_region,
        "blocks": [
            {
                "height": b.height,
                "prev_hash": b.prev_hash.hex(),
                "timestamp": b.timestamp,
                "block_hash": b.block_hash.hex(),
                "txs": [
                    {
                        "type": type(tx).__name__,
                        "bytes": encoding.canonical_encode(tx).hex(),
                    }
                    for tx in b.txs
                ],
            }
            for b in ledger.blocks
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)
