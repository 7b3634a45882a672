"""Smoke test for the tsenet_py extension module."""

import math
import os
import random
import tempfile

import tsenet_py


def main():
    rng = random.Random(0)
    ref = [rng.uniform(-0.5, 0.5) for _ in range(800)]
    assert tsenet_py.si_sdr(ref, ref) == 120.0
    assert abs(tsenet_py.si_sdr([1.0, 1.0, -2.0], [1.0, 0.0, -1.0]) - 10 * math.log10(3)) < 1e-12
    assert tsenet_py.sdr_bsseval(ref, [ref], taps=16) >= 120.0

    model = tsenet_py.TseNet("tiny", seed=1)
    assert model.param_count == 3652
    mixture = [0.3 * math.sin(0.05 * t) + rng.uniform(-0.1, 0.1) for t in range(1001)]
    est = model.extract(mixture, [0.1] * 8)
    assert len(est) == len(mixture)
    assert all(math.isfinite(v) for v in est)

    with tempfile.TemporaryDirectory() as d:
        ckpt = os.path.join(d, "tiny.ckpt")
        model.save(ckpt)
        again = tsenet_py.TseNet.load(ckpt)
        assert again.extract(mixture, [0.1] * 8) == est

        wav = os.path.join(d, "est.wav")
        tsenet_py.write_wav(wav, est)
        samples, rate = tsenet_py.read_wav(wav)
        assert rate == 8000 and len(samples) == len(est)

    checks = tsenet_py.gradcheck("tiny", 0)
    assert checks and all(ok for _, _, ok in checks), [c for c in checks if not c[2]]

    try:
        tsenet_py.TseNet("huge")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")
    print(f"smoke test passed: {len(checks)} gradient checks, worst {max(e for _, e, _ in checks):.2e}")


if __name__ == "__main__":
    main()
