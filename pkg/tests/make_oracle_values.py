"""Regenerate ``oracle_values.py`` with 50-digit mpmath arithmetic.

    python tests/make_oracle_values.py > tests/oracle_values.py

Each value is computed from its defining formula independently of the
package code.
"""
import mpmath as mp

mp.mp.dps = 50


def jt(d, t, r):
    s = 1 - mp.mpf(t)
    return (1 / s) * (mp.sin(r / s) / mp.sin(r)) ** (d - 1)


def jt_limit(d, t):
    # r -> 0: sin(r/s)/sin(r) -> 1/s
    return mp.limit(lambda r: jt(d, t, r), 0)


def guard_positive(B, L, LR, K):
    terms = [mp.pi / B, 1 / (4 * L), mp.sqrt(3 / (4 * B ** 2 * LR * (2 + 2 * L * max(1 / mp.sqrt(K), 1))))]
    return terms


def poly_step(eta, i):
    t = lambda k: 1 - 1 / (1 + eta * k) ** 2
    return t(i + 1) - t(i)


def div_log(d, r):
    return -(d - 1) * r * mp.cot(r) - 1


VALUES = {
    "SINH_1": mp.sinh(1),
    "SINH_2": mp.sinh(2),
    "LOG_4": mp.log(4),
    "JT_D3_HALF_PI4": jt(3, mp.mpf(1) / 2, mp.pi / 4),
    "JT_D4_QUARTER_LIMIT": jt_limit(4, mp.mpf(1) / 4),
    "JT_D2_0P3_1P2": jt(2, mp.mpf("0.3"), mp.mpf("1.2")),
    "JT_D5_0P6_0P9": jt(5, mp.mpf("0.6"), mp.mpf("0.9")),
    "GEODESIC_THIRD": (mp.sin(mp.pi / 6), mp.cos(mp.pi / 6)),
    "GUARD_SPHERE_TERMS": tuple(guard_positive(mp.pi, 10, 1, 1)),
    "GUARD_FLAT_NO_LIP": mp.sqrt(mp.mpf(3) / (8 * mp.mpf(2) ** 2 * mp.mpf("0.5"))),
    "POLY_STEP_0P1_3": poly_step(mp.mpf("0.1"), 3),
    "POLY_STEP_0P05_17": poly_step(mp.mpf("0.05"), 17),
    "DIV_LOG_D2_1": div_log(2, mp.mpf(1)),
    "DIV_LOG_D4_2P5": div_log(4, mp.mpf("2.5")),
    "SPHERE_DEXP_D3_1P3": (mp.sin(mp.mpf("1.3")) / mp.mpf("1.3")) ** 2,
    "L_SCORE_D4_T0": 8 * 9 * mp.mpf(1),
    "L_SCORE_D4_HALF_RATIO2": 8 * 9 / mp.mpf("0.25") * 2,
    "VOL_S2": 4 * mp.pi,
    "VOL_S3": 2 * mp.pi ** 2,
}


def _fmt(v):
    if isinstance(v, tuple):
        return "(" + ", ".join(mp.nstr(x, 17) for x in v) + ")"
    return mp.nstr(v, 17)


if __name__ == "__main__":
    print('"""Frozen high-precision oracle values (generated by make_oracle_values.py)."""')
    for k, v in VALUES.items():
        print(f"{k} = {_fmt(v)}")
