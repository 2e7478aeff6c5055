#!/usr/bin/env python3
"""Independent generator for the wire and key-schedule golden vectors.

Writes crates/core/tests/golden/vectors.txt as `name hex` lines. Uses only
hashlib/hmac/struct plus the `cryptography` package for ChaCha20.
"""
import hashlib
import hmac
import os
import struct

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

CELL_LEN = 512
PAYLOAD_LEN = 505
CMD = {"CREATE": 1, "CREATED": 2, "DESTROY": 3, "RELAY": 4}
RCMD = {"EXTEND": 1, "EXTENDED": 2, "BEGIN": 3, "CONNECTED": 4, "DATA": 5, "END": 6}


def cell(circ, cmd, payload):
    body = struct.pack(">IBH", circ, CMD[cmd], len(payload)) + payload
    return body + b"\0" * (CELL_LEN - len(body))


def relay_payload(cmd, stream, data, digest=b"\0\0\0\0"):
    body = struct.pack(">HH4sHB", 0, stream, digest, len(data), RCMD[cmd]) + data
    return body + b"\0" * (PAYLOAD_LEN - len(body))


def hkdf(secret, label):
    prk = hmac.new(b"tomen-hop-keys-v1", secret, hashlib.sha256).digest()
    return hmac.new(prk, label + b"\x01", hashlib.sha256).digest()


def hop_keys(secret):
    return {l: hkdf(secret, l.encode()) for l in ("fwd-key", "bwd-key", "fwd-dig", "bwd-dig")}


def layer(key, counter, block):
    nonce = b"\0" * 4 + b"\0" * 4 + struct.pack(">Q", counter)
    enc = Cipher(algorithms.ChaCha20(key, nonce), mode=None).encryptor()
    return enc.update(block)


class Digest:
    def __init__(self, seed):
        self.h = hashlib.sha256(seed)

    def seal(self, block):
        zeroed = block[:4] + b"\0\0\0\0" + block[8:]
        self.h.update(zeroed)
        d = self.h.copy().digest()[:4]
        return block[:4] + d + block[8:]


def main():
    v = []
    v.append(("cell_create", cell(0x01020304, "CREATE", bytes(range(32)))))
    v.append(("cell_destroy", cell(7, "DESTROY", b"")))
    v.append(("cell_relay_full", cell(0xFFFFFFFF, "RELAY", bytes(i % 251 for i in range(PAYLOAD_LEN)))))
    v.append(("relay_data_hello", relay_payload("DATA", 5, b"hello")))
    v.append(("relay_end_done", relay_payload("END", 9, b"done")))

    zero = hop_keys(b"\0" * 32)
    v.append(("zero_fwd_key", zero["fwd-key"]))
    v.append(("zero_bwd_key", zero["bwd-key"]))
    v.append(("zero_fwd_digest_state", hashlib.sha256(zero["fwd-dig"]).digest()))
    v.append(("zero_bwd_digest_state", hashlib.sha256(zero["bwd-dig"]).digest()))

    d = Digest(zero["fwd-dig"])
    for i, msg in enumerate([b"a", b"bb", b"ccc"]):
        v.append((f"zero_fwd_seal_{i}", d.seal(relay_payload("DATA", 1, msg))))

    v.append(("keystream_zero_ctr0", layer(zero["fwd-key"], 0, b"\0" * PAYLOAD_LEN)))
    v.append(("keystream_zero_ctr1", layer(zero["fwd-key"], 1, b"\0" * PAYLOAD_LEN)))

    hops = [hop_keys(bytes([b]) * 32) for b in (1, 2, 3)]
    block = Digest(hops[2]["fwd-dig"]).seal(relay_payload("DATA", 1, b"hello"))
    for h in reversed(hops):
        block = layer(h["fwd-key"], 0, block)
    v.append(("onion_three_hops", block))

    out = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "golden", "vectors.txt")
    with open(out, "w") as f:
        for name, data in v:
            f.write(f"{name} {data.hex()}\n")


if __name__ == "__main__":
    main()
