"""Pure-Python reference for the access kernel.

Must stay operation-for-operation identical to ``_chase.pyx``: both backends
are checked against each other for bit-identical cycles, classes and cache
state.
"""
import math

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / 9007199254740992.0
TRUNC_Z = 4.0


def splitmix_next(state):
    """Advance a 1-element uint64 state array and return the next 64-bit word."""
    s = (int(state[0]) + _GOLDEN) & _MASK
    state[0] = s
    z = s
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def std_normal(state):
    """Box-Muller draw, rejected outside +-TRUNC_Z."""
    while True:
        u1 = ((splitmix_next(state) >> 11) + 1) * _INV_2_53
        u2 = (splitmix_next(state) >> 11) * _INV_2_53
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)
        if -TRUNC_Z <= z <= TRUNC_Z:
            return z


def sample_cycles(mean, sigma, state):
    if sigma <= 0.0:
        v = math.floor(mean + 0.5)
    else:
        v = math.floor(mean + sigma * std_normal(state) + 0.5)
    return int(v) if v >= 1 else 1


def chase(tags, stamps, clock, lines, num_sets, policy, repl_state,
          remote, means, sigmas, extra_sigma, rng_state, out_cycles, out_class):
    """Serve ``lines`` in order against one GPU's L2 and sample their latencies.

    ``tags``/``stamps`` are (num_sets, ways) int64 arrays, -1 marks an empty
    way; ``clock`` is a 1-element recency counter. ``policy`` 0 is LRU, 1 is
    random replacement driven by ``repl_state``. Returns the summed cycles.
    """
    ways = tags.shape[1]
    base = 2 if remote else 0
    total = 0
    tick = int(clock[0])
    for i in range(len(lines)):
        line = int(lines[i])
        s = line % num_sets
        row = tags[s]
        hit_way = -1
        empty_way = -1
        for w in range(ways):
            t = row[w]
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
                srow = stamps[s]
                victim = 0
                best = srow[0]
                for w in range(1, ways):
                    if srow[w] < best:
                        best = srow[w]
                        victim = w
            else:
                victim = splitmix_next(repl_state) % ways
            tags[s, victim] = line
            stamps[s, victim] = tick
            cls = base + 1
        c = sample_cycles(float(means[cls]), float(sigmas[cls]) + extra_sigma, rng_state)
        out_cycles[i] = c
        out_class[i] = cls
        total += c
    clock[0] = tick
    return total
