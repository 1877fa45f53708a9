#!/usr/bin/env python3
"""Regenerates the golden wire fixtures in this directory.

Independent reimplementation of the frame and payload layouts; the Rust
codec must match these bytes exactly. Run from anywhere:

    python3 make_vectors.py
"""

import hashlib
import os
import struct

OUT_DIR = os.path.dirname(os.path.abspath(__file__))
MAGIC = 0x43505231


def h256(data: bytes) -> bytes:
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


def frame(command: str, payload: bytes) -> bytes:
    cmd = command.encode("ascii")
    assert len(cmd) <= 12
    return (
        struct.pack("<I", MAGIC)
        + cmd.ljust(12, b"\0")
        + struct.pack("<I", len(payload))
        + payload
    )


def header_bytes(version, prev, merkle, timestamp, bits, nonce) -> bytes:
    return struct.pack("<i", version) + prev + merkle + struct.pack(
        "<III", timestamp, bits, nonce
    )


def txout_bytes(value, creation_height, is_coinbase, script) -> bytes:
    return (
        struct.pack("<QIBH", value, creation_height, 1 if is_coinbase else 0, len(script))
        + script
    )


def tx_bytes(inputs, outputs, coinbase_data) -> bytes:
    out = struct.pack("<I", len(inputs))
    for (txid, vout, witness) in inputs:
        out += txid + struct.pack("<IH", vout, len(witness)) + witness
    out += struct.pack("<I", len(outputs))
    for o in outputs:
        out += txout_bytes(*o)
    if not inputs:
        data = coinbase_data or b""
        out += struct.pack("<H", len(data)) + data
    return out


def items_bytes(items) -> bytes:
    out = struct.pack("<I", len(items))
    for kind, digest in items:
        out += struct.pack("<B", kind) + digest
    return out


def write(name: str, data: bytes):
    with open(os.path.join(OUT_DIR, name), "w") as f:
        f.write(data.hex() + "\n")


def main():
    services = (1 << 0) | (1 << 24)
    write("version.hex", frame("version", struct.pack("<IQI", 1, services, 123456)))
    write("verack.hex", frame("verack", b""))
    write("getstate.hex", frame("getstate", b""))
    write("getheaders.hex", frame("getheaders", struct.pack("<II", 7, 64)))

    h0 = header_bytes(1, b"\0" * 32, h256(b"m0"), 1111, 0x207FFFFF, 42)
    h1 = header_bytes(1, h256(h0), h256(b"m1"), 1212, 0x207FFFFF, 43)
    write("headers.hex", frame("headers", struct.pack("<I", 2) + h0 + h1))

    inv_items = [(1, h256(b"a")), (2, h256(b"b")), (2, h256(b"c"))]
    write("inv.hex", frame("inv", items_bytes(inv_items)))
    write("getdata.hex", frame("getdata", items_bytes(inv_items[:2])))

    coinbase = tx_bytes(
        [], [(50 * 10**8, 1, True, h256(b"w"))], b"CoinPrune/" + b"0" * 64 + b"/"
    )
    block_header = header_bytes(1, h256(b"prev"), h256(coinbase), 1313, 0x207FFFFF, 7)
    write(
        "block.hex",
        frame("block", block_header + struct.pack("<I", 1) + coinbase),
    )

    # Snapshot exchange: a five-entry UTXO set packed into 128-byte chunks,
    # advertised as STATE inventory and served as STATECHUNK pieces.
    entries = []
    for i in range(5):
        outpoint = h256(b"tx%d" % i) + struct.pack("<I", i)
        out = txout_bytes((i + 1) * 1000, 10 + i, i == 0, h256(b"owner%d" % i))
        entries.append((outpoint, out))
    entries.sort(key=lambda e: e[0])
    stream = b"".join(op + out for op, out in entries)

    # Greedy entry-aligned packing: a chunk never splits an entry.
    chunk_limit = 192
    chunks = []
    current = b""
    for op, out in entries:
        entry = op + out
        if current and len(current) + len(entry) > chunk_limit:
            chunks.append(current)
            current = b""
        current += entry
    if current:
        chunks.append(current)
    snap_height = 96
    snap_block_id = h256(b"tip96")
    snap_header = struct.pack("<I", snap_height) + snap_block_id + struct.pack(
        "<I", len(chunks)
    )
    piece_hashes = [h256(snap_header)] + [h256(c) for c in chunks]
    snapshot_id = h256(b"".join(piece_hashes))

    write(
        "exchange_inv.hex",
        frame("inv", items_bytes([(2, h) for h in piece_hashes])),
    )
    pieces = [snap_header] + chunks
    for index, piece in enumerate(pieces):
        write(
            "exchange_chunk_%d.hex" % index,
            frame(
                "statechunk",
                snapshot_id + struct.pack("<I", index) + piece,
            ),
        )
    write("exchange_utxo.hex", stream)
    with open(os.path.join(OUT_DIR, "exchange_id.txt"), "w") as f:
        f.write(snapshot_id.hex() + "\n")


if __name__ == "__main__":
    main()
