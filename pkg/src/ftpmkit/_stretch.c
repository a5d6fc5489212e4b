/*
 * PIN stretching kernel: iterated SHA-256 over an 88-byte chaining record
 *
 *     last[32] | initial[32] | salt[16] | counter (u64 little-endian)
 *
 * for counter = 0 .. rounds-1, last = SHA256(record). Every round is two
 * compression-function calls; the second block is salt, counter and the
 * fixed padding for an 88-byte message.
 *
 * x86 SHA extensions are used when the CPU has them, with two independent
 * chains interleaved to hide instruction latency. A portable C path covers
 * everything else.
 */
#define PY_SSIZE_T_CLEAN
#include <Python.h>
#include <stdint.h>
#include <string.h>

#if defined(__x86_64__) || defined(__i386__)
#include <immintrin.h>
#include <cpuid.h>
#define HAVE_X86 1
#endif

static const uint32_t K256[64] = {
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5,
    0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174,
    0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
    0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967,
    0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85,
    0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
    0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
    0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};

static const uint32_t H0[8] = {
    0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};

#define RECORD_BITS (88 * 8)

static uint32_t load_be32(const uint8_t *p)
{
    return ((uint32_t)p[0] << 24) | ((uint32_t)p[1] << 16) | ((uint32_t)p[2] << 8) | p[3];
}

static void store_be32(uint8_t *p, uint32_t v)
{
    p[0] = v >> 24; p[1] = v >> 16; p[2] = v >> 8; p[3] = v;
}

/* ---- portable ------------------------------------------------------------ */

#define ROTR(x, n) (((x) >> (n)) | ((x) << (32 - (n))))

static void compress_portable(uint32_t st[8], const uint32_t w_in[16])
{
    uint32_t w[64];
    memcpy(w, w_in, 64);
    for (int i = 16; i < 64; i++) {
        uint32_t s0 = ROTR(w[i - 15], 7) ^ ROTR(w[i - 15], 18) ^ (w[i - 15] >> 3);
        uint32_t s1 = ROTR(w[i - 2], 17) ^ ROTR(w[i - 2], 19) ^ (w[i - 2] >> 10);
        w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    uint32_t a = st[0], b = st[1], c = st[2], d = st[3], e = st[4], f = st[5], g = st[6], h = st[7];
    for (int i = 0; i < 64; i++) {
        uint32_t t1 = h + (ROTR(e, 6) ^ ROTR(e, 11) ^ ROTR(e, 25)) + ((e & f) ^ (~e & g)) + K256[i] + w[i];
        uint32_t t2 = (ROTR(a, 2) ^ ROTR(a, 13) ^ ROTR(a, 22)) + ((a & b) ^ (a & c) ^ (b & c));
        h = g; g = f; f = e; e = d + t1; d = c; c = b; b = a; a = t1 + t2;
    }
    st[0] += a; st[1] += b; st[2] += c; st[3] += d; st[4] += e; st[5] += f; st[6] += g; st[7] += h;
}

static void stretch_portable(const uint8_t *initial, const uint8_t *salt, uint64_t rounds, uint8_t *out)
{
    uint32_t last[8] = {0}, block1[16], block2[16];
    for (int i = 0; i < 8; i++)
        block1[8 + i] = load_be32(initial + 4 * i);
    for (int i = 0; i < 4; i++)
        block2[i] = load_be32(salt + 4 * i);
    block2[6] = 0x80000000u;
    for (int i = 7; i < 15; i++)
        block2[i] = 0;
    block2[15] = RECORD_BITS;

    for (uint64_t c = 0; c < rounds; c++) {
        uint32_t st[8];
        memcpy(st, H0, sizeof st);
        memcpy(block1, last, sizeof last);
        compress_portable(st, block1);
        block2[4] = __builtin_bswap32((uint32_t)c);
        block2[5] = __builtin_bswap32((uint32_t)(c >> 32));
        compress_portable(st, block2);
        memcpy(last, st, sizeof last);
    }
    for (int i = 0; i < 8; i++)
        store_be32(out + 4 * i, last[i]);
}

/* ---- SHA extensions ------------------------------------------------------ */

#ifdef HAVE_X86
#define SHANI __attribute__((target("sha,sse4.1,ssse3")))
#define MAXLANES 2

/* State lives in the ABEF/CDGH register layout the SHA instructions use. */
SHANI __attribute__((always_inline)) static inline void
compress_lanes(const int n, __m128i s0[], __m128i s1[], __m128i m[][4])
{
    __m128i save0[MAXLANES], save1[MAXLANES];
    for (int l = 0; l < n; l++) { save0[l] = s0[l]; save1[l] = s1[l]; }
#pragma GCC unroll 16
    for (int r = 0; r < 16; r++) {
        const __m128i k = _mm_loadu_si128((const __m128i *)&K256[4 * r]);
        for (int l = 0; l < n; l++) {
            __m128i msg = _mm_add_epi32(m[l][r & 3], k);
            s1[l] = _mm_sha256rnds2_epu32(s1[l], s0[l], msg);
            msg = _mm_shuffle_epi32(msg, 0x0E);
            s0[l] = _mm_sha256rnds2_epu32(s0[l], s1[l], msg);
            if (r < 12) {
                __m128i t = _mm_sha256msg1_epu32(m[l][r & 3], m[l][(r + 1) & 3]);
                t = _mm_add_epi32(t, _mm_alignr_epi8(m[l][(r + 3) & 3], m[l][(r + 2) & 3], 4));
                m[l][r & 3] = _mm_sha256msg2_epu32(t, m[l][(r + 3) & 3]);
            }
        }
    }
    for (int l = 0; l < n; l++) {
        s0[l] = _mm_add_epi32(s0[l], save0[l]);
        s1[l] = _mm_add_epi32(s1[l], save1[l]);
    }
}

SHANI static void to_abef(const uint32_t st[8], __m128i *abef, __m128i *cdgh)
{
    __m128i t = _mm_shuffle_epi32(_mm_loadu_si128((const __m128i *)&st[0]), 0xB1);
    __m128i u = _mm_shuffle_epi32(_mm_loadu_si128((const __m128i *)&st[4]), 0x1B);
    *abef = _mm_alignr_epi8(t, u, 8);
    *cdgh = _mm_blend_epi16(u, t, 0xF0);
}

/* ABEF/CDGH back to (ABCD, EFGH) word order, i.e. digest words 0-3 and 4-7. */
SHANI __attribute__((always_inline)) static inline void
from_abef(__m128i abef, __m128i cdgh, __m128i *lo, __m128i *hi)
{
    __m128i t = _mm_shuffle_epi32(abef, 0x1B);
    cdgh = _mm_shuffle_epi32(cdgh, 0xB1);
    *lo = _mm_blend_epi16(t, cdgh, 0xF0);
    *hi = _mm_alignr_epi8(cdgh, t, 8);
}

SHANI __attribute__((always_inline)) static inline void
stretch_lanes(const int n, const uint8_t *const initials[], const uint8_t *salt, uint64_t rounds,
              uint8_t *const outs[])
{
    const __m128i bswap = _mm_set_epi64x(0x0c0d0e0f08090a0bULL, 0x0405060700010203ULL);
    __m128i iv0, iv1, saltw, last[MAXLANES][2], init[MAXLANES][2];
    to_abef(H0, &iv0, &iv1);
    saltw = _mm_shuffle_epi8(_mm_loadu_si128((const __m128i *)salt), bswap);
    for (int l = 0; l < n; l++) {
        last[l][0] = last[l][1] = _mm_setzero_si128();
        init[l][0] = _mm_shuffle_epi8(_mm_loadu_si128((const __m128i *)initials[l]), bswap);
        init[l][1] = _mm_shuffle_epi8(_mm_loadu_si128((const __m128i *)(initials[l] + 16)), bswap);
    }
    const __m128i tail = _mm_set_epi32(RECORD_BITS, 0, 0, 0);

    for (uint64_t c = 0; c < rounds; c++) {
        __m128i s0[MAXLANES], s1[MAXLANES], m[MAXLANES][4];
        for (int l = 0; l < n; l++) {
            s0[l] = iv0; s1[l] = iv1;
            m[l][0] = last[l][0]; m[l][1] = last[l][1];
            m[l][2] = init[l][0]; m[l][3] = init[l][1];
        }
        compress_lanes(n, s0, s1, m);
        const __m128i ctr = _mm_set_epi32(0, (int)0x80000000u,
                                          (int)__builtin_bswap32((uint32_t)(c >> 32)),
                                          (int)__builtin_bswap32((uint32_t)c));
        for (int l = 0; l < n; l++) {
            m[l][0] = saltw; m[l][1] = ctr; m[l][2] = _mm_setzero_si128(); m[l][3] = tail;
        }
        compress_lanes(n, s0, s1, m);
        for (int l = 0; l < n; l++)
            from_abef(s0[l], s1[l], &last[l][0], &last[l][1]);
    }
    for (int l = 0; l < n; l++) {
        _mm_storeu_si128((__m128i *)outs[l], _mm_shuffle_epi8(last[l][0], bswap));
        _mm_storeu_si128((__m128i *)(outs[l] + 16), _mm_shuffle_epi8(last[l][1], bswap));
    }
}

SHANI static void stretch_shani_1(const uint8_t *const in[], const uint8_t *salt, uint64_t rounds,
                                  uint8_t *const out[])
{
    stretch_lanes(1, in, salt, rounds, out);
}

SHANI static void stretch_shani_2(const uint8_t *const in[], const uint8_t *salt, uint64_t rounds,
                                  uint8_t *const out[])
{
    stretch_lanes(2, in, salt, rounds, out);
}

static int cpu_has_sha(void)
{
    unsigned int a, b, c, d;
    if (!__get_cpuid_count(7, 0, &a, &b, &c, &d))
        return 0;
    if (!(b & (1u << 29)))           /* SHA */
        return 0;
    if (!__get_cpuid(1, &a, &b, &c, &d))
        return 0;
    return (c & (1u << 19)) && (c & (1u << 9));  /* SSE4.1, SSSE3 */
}
#else
static int cpu_has_sha(void) { return 0; }
#endif

static int have_sha;

/* stretch(initials, salt, rounds, portable=False) -> list[bytes] */
static PyObject *py_stretch(PyObject *self, PyObject *args, PyObject *kwargs)
{
    static char *kwlist[] = {"initials", "salt", "rounds", "portable", NULL};
    PyObject *seq;
    Py_buffer salt;
    unsigned long long rounds;
    int portable = 0;
    if (!PyArg_ParseTupleAndKeywords(args, kwargs, "Oy*K|p", kwlist, &seq, &salt, &rounds, &portable))
        return NULL;
    if (salt.len != 16) {
        PyBuffer_Release(&salt);
        PyErr_SetString(PyExc_ValueError, "salt must be 16 bytes");
        return NULL;
    }
    PyObject *fast = PySequence_Fast(seq, "initials must be a sequence of 32-byte values");
    if (!fast) {
        PyBuffer_Release(&salt);
        return NULL;
    }
    Py_ssize_t n = PySequence_Fast_GET_SIZE(fast);
    uint8_t *in = PyMem_Malloc(n * 32 + 1), *out = PyMem_Malloc(n * 32 + 1);
    PyObject *result = NULL;
    if (!in || !out) {
        PyErr_NoMemory();
        goto done;
    }
    for (Py_ssize_t i = 0; i < n; i++) {
        PyObject *item = PySequence_Fast_GET_ITEM(fast, i);
        char *buf;
        Py_ssize_t len;
        if (PyBytes_AsStringAndSize(item, &buf, &len) < 0)
            goto done;
        if (len != 32) {
            PyErr_SetString(PyExc_ValueError, "initial values must be 32 bytes");
            goto done;
        }
        memcpy(in + 32 * i, buf, 32);
    }

    Py_BEGIN_ALLOW_THREADS
#ifdef HAVE_X86
    if (have_sha && !portable) {
        Py_ssize_t i = 0;
        for (; i + 1 < n; i += 2) {
            const uint8_t *src[2] = {in + 32 * i, in + 32 * (i + 1)};
            uint8_t *dst[2] = {out + 32 * i, out + 32 * (i + 1)};
            stretch_shani_2(src, salt.buf, rounds, dst);
        }
        if (i < n) {
            const uint8_t *src[1] = {in + 32 * i};
            uint8_t *dst[1] = {out + 32 * i};
            stretch_shani_1(src, salt.buf, rounds, dst);
        }
    } else
#endif
    {
        for (Py_ssize_t i = 0; i < n; i++)
            stretch_portable(in + 32 * i, salt.buf, rounds, out + 32 * i);
    }
    Py_END_ALLOW_THREADS

    result = PyList_New(n);
    if (!result)
        goto done;
    for (Py_ssize_t i = 0; i < n; i++) {
        PyObject *b = PyBytes_FromStringAndSize((const char *)out + 32 * i, 32);
        if (!b) {
            Py_CLEAR(result);
            goto done;
        }
        PyList_SET_ITEM(result, i, b);
    }
done:
    PyMem_Free(in);
    PyMem_Free(out);
    Py_DECREF(fast);
    PyBuffer_Release(&salt);
    return result;
}

static PyObject *py_accelerated(PyObject *self, PyObject *unused)
{
    return PyBool_FromLong(have_sha);
}

static PyMethodDef methods[] = {
    {"stretch", (PyCFunction)(void (*)(void))py_stretch, METH_VARARGS | METH_KEYWORDS,
     "stretch(initials, salt, rounds, portable=False) -> list of 32-byte results"},
    {"accelerated", py_accelerated, METH_NOARGS, "True when SHA CPU instructions are used"},
    {NULL, NULL, 0, NULL},
};

static struct PyModuleDef module = {PyModuleDef_HEAD_INIT, "_stretch", NULL, -1, methods};

PyMODINIT_FUNC PyInit__stretch(void)
{
    have_sha = cpu_has_sha();
    return PyModule_Create(&module);
}
