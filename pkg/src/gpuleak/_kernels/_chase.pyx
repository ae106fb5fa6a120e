# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled access kernel. Mirrors ``_pychase.py`` operation for operation."""
from libc.math cimport sqrt, log, cos, floor, M_PI
from libc.stdint cimport uint64_t, int64_t, int8_t

cdef double TRUNC_Z = 4.0
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _next(uint64_t* s) noexcept nogil:
    cdef uint64_t z
    s[0] += <uint64_t>0x9E3779B97F4A7C15
    z = s[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EB
    return z ^ (z >> 31)


cdef inline double _normal(uint64_t* s) noexcept nogil:
    cdef double u1, u2, z
    while True:
        u1 = (<double>((_next(s) >> 11) + 1)) * INV_2_53
        u2 = (<double>(_next(s) >> 11)) * INV_2_53
        z = sqrt(-2.0 * log(u1)) * cos(2.0 * M_PI * u2)
        if -TRUNC_Z <= z <= TRUNC_Z:
            return z


cdef inline int64_t _sample(double mean, double sigma, uint64_t* s) noexcept nogil:
    cdef double v
    if sigma <= 0.0:
        v = floor(mean + 0.5)
    else:
        v = floor(mean + sigma * _normal(s) + 0.5)
    if v >= 1.0:
        return <int64_t>v
    return 1


def splitmix_next(uint64_t[::1] state):
    return _next(&state[0])


def chase(int64_t[:, ::1] tags, int64_t[:, ::1] stamps, int64_t[::1] clock,
          const int64_t[::1] lines, int64_t num_sets, int policy,
          uint64_t[::1] repl_state, bint remote, const double[::1] means,
          const double[::1] sigmas, double extra_sigma, uint64_t[::1] rng_state,
          int64_t[::1] out_cycles, int8_t[::1] out_class):
    cdef Py_ssize_t n = lines.shape[0]
    cdef Py_ssize_t ways = tags.shape[1]
    cdef Py_ssize_t i, w, hit_way, empty_way, victim
    cdef int64_t line, t, best, c
    cdef int64_t s
    cdef int64_t tick = clock[0]
    cdef int64_t total = 0
    cdef int base = 2 if remote else 0
    cdef int cls
    with nogil:
        for i in range(n):
            line = lines[i]
            s = line % num_sets
            hit_way = -1
            empty_way = -1
            for w in range(ways):
                t = tags[s, w]
                if t == line:
                    hit_way = w
                    break
                if t == -1 and empty_way < 0:
                    empty_way = w
            tick += 1
            if hit_way >= 0:
                stamps[s, hit_way] = tick
                cls = base
            else:
                if empty_way >= 0:
                    victim = empty_way
                elif policy == 0:
                    victim = 0
                    best = stamps[s, 0]
                    for w in range(1, ways):
                        if stamps[s, w] < best:
                            best = stamps[s, w]
                            victim = w
                else:
                    victim = <Py_ssize_t>(_next(&repl_state[0]) % <uint64_t>ways)
                tags[s, victim] = line
                stamps[s, victim] = tick
                cls = base + 1
            c = _sample(means[cls], sigmas[cls] + extra_sigma, &rng_state[0])
            out_cycles[i] = c
            out_class[i] = cls
            total += c
    clock[0] = tick
    return total
