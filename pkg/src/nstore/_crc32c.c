/* CRC-32C (Castagnoli, reflected poly 0x82F63B78), slicing-by-8.
 *
 * Releases the GIL while hashing so frame encode/verify can overlap
 * with socket and file work in other threads.
 */
#define PY_SSIZE_T_CLEAN
#include <Python.h>
#include <stdint.h>
#include <string.h>

static uint32_t table[8][256];

static void fill_tables(void) {
    for (int n = 0; n < 256; n++) {
        uint32_t c = (uint32_t)n;
        for (int k = 0; k < 8; k++)
            c = (c & 1) ? 0x82F63B78u ^ (c >> 1) : c >> 1;
        table[0][n] = c;
    }
    for (int n = 0; n < 256; n++) {
        uint32_t c = table[0][n];
        for (int k = 1; k < 8; k++) {
            c = table[0][c & 0xFF] ^ (c >> 8);
            table[k][n] = c;
        }
    }
}

static uint32_t crc32c_update(uint32_t crc, const unsigned char *buf, Py_ssize_t len) {
    crc = ~crc;
    while (len >= 8) {
        uint32_t lo, hi;
        memcpy(&lo, buf, 4);
        memcpy(&hi, buf + 4, 4);
        crc ^= lo;
        crc = table[7][crc & 0xFF] ^ table[6][(crc >> 8) & 0xFF] ^
              table[5][(crc >> 16) & 0xFF] ^ table[4][crc >> 24] ^
              table[3][hi & 0xFF] ^ table[2][(hi >> 8) & 0xFF] ^
              table[1][(hi >> 16) & 0xFF] ^ table[0][hi >> 24];
        buf += 8;
        len -= 8;
    }
    while (len--)
        crc = table[0][(crc ^ *buf++) & 0xFF] ^ (crc >> 8);
    return ~crc;
}

static PyObject *py_crc32c(PyObject *self, PyObject *args) {
    Py_buffer view;
    unsigned int crc = 0;
    (void)self;
    if (!PyArg_ParseTuple(args, "y*|I", &view, &crc))
        return NULL;
    uint32_t out;
    Py_BEGIN_ALLOW_THREADS
    out = crc32c_update((uint32_t)crc, view.buf, view.len);
    Py_END_ALLOW_THREADS
    PyBuffer_Release(&view);
    return PyLong_FromUnsignedLong(out);
}

static PyMethodDef methods[] = {
    {"crc32c", py_crc32c, METH_VARARGS,
     "crc32c(data, crc=0) -> int\n\nIncremental CRC-32C over a bytes-like object."},
    {NULL, NULL, 0, NULL}
};

static struct PyModuleDef moduledef = {
    PyModuleDef_HEAD_INIT, "_crc32c", NULL, -1, methods,
    NULL, NULL, NULL, NULL
};

PyMODINIT_FUNC PyInit__crc32c(void) {
    fill_tables();
    return PyModule_Create(&moduledef);
}
