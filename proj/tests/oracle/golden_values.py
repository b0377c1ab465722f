"""Independent reference computations for the frozen constants in the C++ tests.

Run: python3 tests/oracle/golden_values.py
"""
import math
import statistics

M64 = (1 << 64) - 1


def mix64(x):
    x = (x + 0x9E3779B97F4A7C15) & M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & M64
    return x ^ (x >> 31)


def fnv1a(data, basis=0xCBF29CE484222325):
    h = basis
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & M64
    return h


def derive_seed(seed, stream):
    if isinstance(stream, str):
        stream = fnv1a(stream.encode())
    return mix64(mix64(seed) ^ ((stream * 0xD6E8FEB86659FD93 + 1) & M64))


def feature_hash(key):
    return mix64(fnv1a(key.encode(), 0xCBF29CE484222325 ^ 0x62646C61622D6668))


def ce(logits, label):
    m = max(logits)
    lse = m + math.log(sum(math.exp(z - m) for z in logits))
    return lse - logits[label]


def pvariance(xs):
    return statistics.pvariance(xs)


def mt19937_64_first(seed):
    n, m = 312, 156
    a = 0xB5026F5AA96619E9
    upper, lower = 0xFFFFFFFF80000000, 0x7FFFFFFF
    mt = [0] * n
    mt[0] = seed & M64
    for i in range(1, n):
        mt[i] = (6364136223846793005 * (mt[i - 1] ^ (mt[i - 1] >> 62)) + i) & M64
    out = []
    idx = n
    for _ in range(3):
        if idx >= n:
            for i in range(n):
                x = (mt[i] & upper) | (mt[(i + 1) % n] & lower)
                xa = x >> 1
                if x & 1:
                    xa ^= a
                mt[i] = mt[(i + m) % n] ^ xa
            idx = 0
        y = mt[idx]
        idx += 1
        y ^= (y >> 29) & 0x5555555555555555
        y ^= (y << 17) & 0x71D67FFFEDA60000
        y ^= (y << 37) & 0xFFF7EEE000000000
        y ^= y >> 43
        out.append(y & M64)
    return out


def uniform_index(draws, n):
    limit = M64 - (M64 % n)
    for x in draws:
        if x < limit:
            return x % n
    raise RuntimeError("rejected every draw")


if __name__ == "__main__":
    print("ce uniform C=2      ", repr(ce([0.0, 0.0], 0)))
    print("ce [2.528,-2.87] y=0", repr(ce([2.528, -2.87], 0)))
    print("ce [-2.701,3.044] y=1", repr(ce([-2.701, 3.044], 1)))
    print("reward [2.528,-2.87] y=1", repr(-ce([2.528, -2.87], 1)))
    print("pvariance [0.2,0.4,0.9]", repr(pvariance([0.2, 0.4, 0.9])))
    print("pvariance [0,1]", repr(pvariance([0.0, 1.0])))
    print("mix64(0)", hex(mix64(0)))
    print("derive_seed(1, 'poison')", hex(derive_seed(1, "poison")))
    print("derive_seed(42, 7)", hex(derive_seed(42, 7)))
    for k in ["cf", "the", "cf the"]:
        print("feature_hash(%r)" % k, hex(feature_hash(k)), "mod 2^18 =", feature_hash(k) % (1 << 18))
    print("mt19937_64(5489) first", [hex(x) for x in mt19937_64_first(5489)])
    print("uniform_index(seed 7, n=10)", uniform_index(mt19937_64_first(7), 10))
    vals = [90.0, 92.5, 95.0, 88.0, 91.5]
    print("mean", repr(statistics.fmean(vals)), "pstdev", repr(statistics.pstdev(vals)))
    print("top_set_size", [(n, max(1, math.ceil(0.05 * n))) for n in [1, 19, 20, 21, 40, 100, 2000]])
