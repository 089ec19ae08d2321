# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel lane.

Implements the same five functions as ``_pure``: a one-shot BLAKE2b
(RFC 7693, sequential mode, optional key, no salt/personalization) plus
MSB-first fixed-layout bit packing. Outputs are bit-identical to the
pure lane; the test suite cross-checks both against hashlib.
"""

from libc.stdint cimport uint8_t, uint64_t
from libc.string cimport memset

BACKEND = "c"

cdef uint64_t[8] IV
IV[0] = 0x6a09e667f3bcc908ULL
IV[1] = 0xbb67ae8584caa73bULL
IV[2] = 0x3c6ef372fe94f82bULL
IV[3] = 0xa54ff53a5f1d36f1ULL
IV[4] = 0x510e527fade682d1ULL
IV[5] = 0x9b05688c2b3e6c1fULL
IV[6] = 0x1f83d9abfb41bd6bULL
IV[7] = 0x5be0cd19137e2179ULL

cdef uint8_t[12][16] SIGMA
cdef int _i, _j
cdef list _sigma_rows = [
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15],
    [14, 10, 4, 8, 9, 15, 13, 6, 1, 12, 0, 2, 11, 7, 5, 3],
    [11, 8, 12, 0, 5, 2, 15, 13, 10, 14, 3, 6, 7, 1, 9, 4],
    [7, 9, 3, 1, 13, 12, 11, 14, 2, 6, 5, 10, 4, 0, 15, 8],
    [9, 0, 5, 7, 2, 4, 10, 15, 14, 1, 11, 12, 6, 8, 3, 13],
    [2, 12, 6, 10, 0, 11, 8, 3, 4, 13, 7, 5, 15, 14, 1, 9],
    [12, 5, 1, 15, 14, 13, 4, 10, 0, 7, 6, 3, 9, 2, 8, 11],
    [13, 11, 7, 14, 12, 1, 3, 9, 5, 0, 15, 4, 8, 6, 2, 10],
    [6, 15, 14, 9, 11, 3, 0, 8, 12, 2, 13, 7, 1, 4, 10, 5],
    [10, 2, 8, 4, 7, 6, 1, 5, 15, 11, 9, 14, 3, 12, 13, 0],
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15],
    [14, 10, 4, 8, 9, 15, 13, 6, 1, 12, 0, 2, 11, 7, 5, 3],
]
for _i in range(12):
    for _j in range(16):
        SIGMA[_i][_j] = _sigma_rows[_i][_j]


cdef inline uint64_t rotr64(uint64_t x, int n) nogil:
    return (x >> n) | (x << (64 - n))


cdef inline uint64_t load64(const uint8_t *p) nogil:
    return (
        (<uint64_t> p[0])
        | ((<uint64_t> p[1]) << 8)
        | ((<uint64_t> p[2]) << 16)
        | ((<uint64_t> p[3]) << 24)
        | ((<uint64_t> p[4]) << 32)
        | ((<uint64_t> p[5]) << 40)
        | ((<uint64_t> p[6]) << 48)
        | ((<uint64_t> p[7]) << 56)
    )


cdef void compress(uint64_t *h, const uint8_t *block, uint64_t t, bint last) nogil:
    cdef uint64_t m[16]
    cdef uint64_t v[16]
    cdef int i, r
    cdef const uint8_t *s

    for i in range(16):
        m[i] = load64(block + 8 * i)
    for i in range(8):
        v[i] = h[i]
        v[i + 8] = IV[i]
    v[12] ^= t
    # High word of the 128-bit length counter stays zero: inputs are small.
    if last:
        v[14] = ~v[14]

    for r in range(12):
        s = SIGMA[r]
        # Column steps.
        v[0] += v[4] + m[s[0]]; v[12] = rotr64(v[12] ^ v[0], 32); v[8] += v[12]; v[4] = rotr64(v[4] ^ v[8], 24)
        v[0] += v[4] + m[s[1]]; v[12] = rotr64(v[12] ^ v[0], 16); v[8] += v[12]; v[4] = rotr64(v[4] ^ v[8], 63)
        v[1] += v[5] + m[s[2]]; v[13] = rotr64(v[13] ^ v[1], 32); v[9] += v[13]; v[5] = rotr64(v[5] ^ v[9], 24)
        v[1] += v[5] + m[s[3]]; v[13] = rotr64(v[13] ^ v[1], 16); v[9] += v[13]; v[5] = rotr64(v[5] ^ v[9], 63)
        v[2] += v[6] + m[s[4]]; v[14] = rotr64(v[14] ^ v[2], 32); v[10] += v[14]; v[6] = rotr64(v[6] ^ v[10], 24)
        v[2] += v[6] + m[s[5]]; v[14] = rotr64(v[14] ^ v[2], 16); v[10] += v[14]; v[6] = rotr64(v[6] ^ v[10], 63)
        v[3] += v[7] + m[s[6]]; v[15] = rotr64(v[15] ^ v[3], 32); v[11] += v[15]; v[7] = rotr64(v[7] ^ v[11], 24)
        v[3] += v[7] + m[s[7]]; v[15] = rotr64(v[15] ^ v[3], 16); v[11] += v[15]; v[7] = rotr64(v[7] ^ v[11], 63)
        # Diagonal steps.
        v[0] += v[5] + m[s[8]]; v[15] = rotr64(v[15] ^ v[0], 32); v[10] += v[15]; v[5] = rotr64(v[5] ^ v[10], 24)
        v[0] += v[5] + m[s[9]]; v[15] = rotr64(v[15] ^ v[0], 16); v[10] += v[15]; v[5] = rotr64(v[5] ^ v[10], 63)
        v[1] += v[6] + m[s[10]]; v[12] = rotr64(v[12] ^ v[1], 32); v[11] += v[12]; v[6] = rotr64(v[6] ^ v[11], 24)
        v[1] += v[6] + m[s[11]]; v[12] = rotr64(v[12] ^ v[1], 16); v[11] += v[12]; v[6] = rotr64(v[6] ^ v[11], 63)
        v[2] += v[7] + m[s[12]]; v[13] = rotr64(v[13] ^ v[2], 32); v[8] += v[13]; v[7] = rotr64(v[7] ^ v[8], 24)
        v[2] += v[7] + m[s[13]]; v[13] = rotr64(v[13] ^ v[2], 16); v[8] += v[13]; v[7] = rotr64(v[7] ^ v[8], 63)
        v[3] += v[4] + m[s[14]]; v[14] = rotr64(v[14] ^ v[3], 32); v[9] += v[14]; v[4] = rotr64(v[4] ^ v[9], 24)
        v[3] += v[4] + m[s[15]]; v[14] = rotr64(v[14] ^ v[3], 16); v[9] += v[14]; v[4] = rotr64(v[4] ^ v[9], 63)

    for i in range(8):
        h[i] ^= v[i] ^ v[i + 8]


cdef void blake2b(uint8_t *out, int outlen, const uint8_t *key, int keylen,
                  const uint8_t *msg, Py_ssize_t msglen) nogil:
    cdef uint64_t h[8]
    cdef uint8_t buf[128]
    cdef uint64_t t = 0
    cdef Py_ssize_t off = 0
    cdef int i

    for i in range(8):
        h[i] = IV[i]
    h[0] ^= 0x01010000ULL ^ ((<uint64_t> keylen) << 8) ^ (<uint64_t> outlen)

    if keylen > 0:
        memset(buf, 0, 128)
        for i in range(keylen):
            buf[i] = key[i]
        t = 128
        if msglen == 0:
            compress(h, buf, t, True)
        else:
            compress(h, buf, t, False)

    if msglen > 0 or keylen == 0:
        while msglen - off > 128:
            t += 128
            compress(h, msg + off, t, False)
            off += 128
        memset(buf, 0, 128)
        for i in range(<int> (msglen - off)):
            buf[i] = msg[off + i]
        t += <uint64_t> (msglen - off)
        compress(h, buf, t, True)

    for i in range(outlen):
        out[i] = <uint8_t> ((h[i >> 3] >> (8 * (i & 7))) & 0xff)


def prf_tag(bytes key, bytes msg):
    """64-bit keyed-PRF tag of ``msg`` (little-endian digest word)."""
    cdef uint8_t out[8]
    blake2b(out, 8, <const uint8_t *> (<char *> key), <int> len(key),
            <const uint8_t *> (<char *> msg), len(msg))
    return load64(out)


def prf_block(bytes key, bytes msg):
    """64-byte keyed-PRF output, used as a one-time pad."""
    cdef uint8_t out[64]
    blake2b(out, 64, <const uint8_t *> (<char *> key), <int> len(key),
            <const uint8_t *> (<char *> msg), len(msg))
    return (<char *> out)[:64]


def xor_pad(bytes key, bytes msg, bytes payload):
    """XOR ``payload`` (at most 64 bytes) with the pad derived from ``msg``."""
    cdef uint8_t pad[64]
    cdef Py_ssize_t n = len(payload)
    cdef Py_ssize_t i
    if n > 64:
        raise ValueError("payload longer than one pad block")
    blake2b(pad, 64, <const uint8_t *> (<char *> key), <int> len(key),
            <const uint8_t *> (<char *> msg), len(msg))
    out = bytearray(payload)
    cdef unsigned char[:] po = out
    for i in range(n):
        po[i] = po[i] ^ pad[i]
    return bytes(out)


cdef uint64_t MASK54 = (1ULL << 54) - 1


def seal_slot(bytes key, bytes pad_msg, bytes mac_head, bytes plaintext, unsigned int partial):
    """Encrypt one 64-byte slot payload and attach its ECC area.

    The ECC area packs the 10-bit counter shard above the 54-bit tag.
    """
    cdef uint8_t pad[64]
    cdef uint8_t msg[256]
    cdef uint8_t out8[8]
    cdef Py_ssize_t headlen = len(mac_head)
    cdef Py_ssize_t i
    cdef uint64_t tag, ecc
    if len(plaintext) != 64 or headlen > 192:
        raise ValueError("seal_slot expects a 64-byte payload and short header")
    blake2b(pad, 64, <const uint8_t *> (<char *> key), <int> len(key),
            <const uint8_t *> (<char *> pad_msg), len(pad_msg))
    out = bytearray(72)
    cdef unsigned char[:] po = out
    cdef const uint8_t *pt = <const uint8_t *> (<char *> plaintext)
    cdef const uint8_t *hd = <const uint8_t *> (<char *> mac_head)
    for i in range(headlen):
        msg[i] = hd[i]
    for i in range(64):
        po[i] = pt[i] ^ pad[i]
        msg[headlen + i] = po[i]
    blake2b(out8, 8, <const uint8_t *> (<char *> key), <int> len(key), msg, headlen + 64)
    tag = load64(out8) & MASK54
    ecc = ((<uint64_t> partial) << 54) | tag
    for i in range(8):
        po[64 + i] = <uint8_t> ((ecc >> (8 * (7 - i))) & 0xff)
    return bytes(out)


def check_slot(bytes key, bytes mac_head, bytes block, unsigned int partial):
    """Verify a stored slot block against its expected counter shard."""
    cdef uint8_t msg[256]
    cdef uint8_t out8[8]
    cdef Py_ssize_t headlen = len(mac_head)
    cdef Py_ssize_t i
    cdef uint64_t ecc = 0, tag
    cdef const uint8_t *blk = <const uint8_t *> (<char *> block)
    if len(block) != 72 or headlen > 192:
        raise ValueError("check_slot expects a 72-byte block and short header")
    for i in range(8):
        ecc = (ecc << 8) | blk[64 + i]
    if (ecc >> 54) != <uint64_t> partial:
        return False
    for i in range(headlen):
        msg[i] = (<const uint8_t *> (<char *> mac_head))[i]
    for i in range(64):
        msg[headlen + i] = blk[i]
    blake2b(out8, 8, <const uint8_t *> (<char *> key), <int> len(key), msg, headlen + 64)
    tag = load64(out8) & MASK54
    return tag == (ecc & MASK54)


def pack_fields(widths, values, int nbytes):
    """Pack ``values`` into ``nbytes`` bytes, MSB-first, per the width list."""
    out = bytearray(nbytes)
    cdef unsigned char[:] buf = out
    cdef int bitpos = 0
    cdef int w, j, bit
    cdef uint64_t v
    for w, pv in zip(widths, values):
        v = <uint64_t> pv
        for j in range(w):
            bit = bitpos + j
            if (v >> (w - 1 - j)) & 1:
                buf[bit >> 3] |= 0x80 >> (bit & 7)
        bitpos += w
    return bytes(out)


def unpack_fields(widths, bytes data):
    """Inverse of :func:`pack_fields`; returns one int per width."""
    cdef const uint8_t *buf = <const uint8_t *> (<char *> data)
    cdef int bitpos = 0
    cdef int w, j, bit
    cdef uint64_t v
    out = []
    for w in widths:
        v = 0
        for j in range(w):
            bit = bitpos + j
            v = (v << 1) | ((buf[bit >> 3] >> (7 - (bit & 7))) & 1)
        bitpos += w
        out.append(v)
    return out
