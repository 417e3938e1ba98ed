"""Smoke test for the ge2ae_py extension.

Build and install first:
    pip install --no-build-isolation -e crates/py
"""

import math
import random
import sys
import tempfile

import ge2ae_py as g


def close(a, b, tol):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    rng = random.Random(0)
    shape = [8, 8, 3]
    data = [rng.uniform(-1, 1) for _ in range(8 * 8 * 3)]

    re, im = g.dft2d(shape, data)
    back, imag = g.idft2d(shape, re, im)
    assert close(back, data, 1e-12), "roundtrip"
    assert max(abs(v) for v in imag) < 1e-12
    energy = sum(r * r + i * i for r, i in zip(re, im)) / 64
    assert math.isclose(energy, sum(v * v for v in data), rel_tol=1e-12), "Parseval"

    visible, masked = g.random_masking(64, 0.75, 7)
    assert len(visible) == 16 and sorted(visible + masked) == list(range(64))

    assert abs(g.focal_frequency_loss([1, 1, 1], [2.0], [0.0], [0.0], [0.0]) - 8.0) < 1e-10
    assert g.lr_at_step(10, 110, 10, 1e-3) == 1e-3

    n = 32
    diag = [0.0] * (n * n)
    for i in range(1, n + 1):
        diag[(i - 1) * n + i - 1] = math.sqrt(n * i ** -1.5)
    alpha, eig = g.fit_power_law(n, n, diag, 1, n)
    assert abs(alpha - 1.5) < 1e-6 and len(eig) == n

    x = [rng.uniform(-1, 1) for _ in range(20 * 4)]
    assert abs(g.cka(20, 4, x, 4, [2.0 * v for v in x]) - 1.0) < 1e-9

    try:
        g.Checkpoint.load("/nonexistent/final.ge2a")
    except OSError:
        pass
    else:
        raise AssertionError("missing checkpoint should raise")
    with tempfile.NamedTemporaryFile(suffix=".ge2a") as f:
        f.write(b"XXXX")
        f.flush()
        try:
            g.Checkpoint.load(f.name)
        except ValueError as e:
            assert "magic" in str(e)

    checks, failed = g.selftest()
    assert failed == 0, f"{failed} of {checks} self-test checks failed"
    print(f"ok: {checks} self-test checks passed")


if __name__ == "__main__":
    sys.exit(main())
