"""Fine-registration success rate per view pair on phantom substacks.

Each trial registers a view against a copy of another view perturbed by a
random rigid motion of up to --max-shift voxels and --max-angle degrees. A
trial succeeds when the residual is below 1 voxel and 1 degree.

Example:
    python3 scripts/fine_registration_rates.py --attenuation 12 40 --trials 10
"""
import argparse
import time

import numpy as np

from mvcells.phantom import PhantomSpec, generate_phantom
from mvcells.pipeline import PAIRS, register_views
from mvcells.registration import (MIConfig, compose, fine_register, invert, resample,
                                  rotation_about_axis, rotation_about_center)


def trial(seed, attenuation, ref, tgt, max_shift, max_angle):
    ph = generate_phantom(PhantomSpec(dims=(91, 90, 90), n_somata=560,
                                      attenuation_length=attenuation, rng_seed=seed))
    reg = register_views(ph.views, ph.true_transforms)
    rng = np.random.default_rng(1000 + seed)
    center = (np.array(reg[0].dims) - 1) / 2
    d = rng.normal(size=3)
    shift = d / np.linalg.norm(d) * rng.uniform(0, max_shift)
    p = rotation_about_center(rotation_about_axis(rng.normal(size=3),
                                                  rng.uniform(-max_angle, max_angle)),
                              center, shift)
    t = fine_register(reg[ref], resample(reg[tgt], p), MIConfig(seed=seed))
    err = compose(t, invert(p))
    return err.rotation_angle_deg(), float(np.linalg.norm(err.apply(center) - center))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--attenuation", type=float, nargs="+", default=[40.0])
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--max-shift", type=float, default=5.0)
    ap.add_argument("--max-angle", type=float, default=5.0)
    args = ap.parse_args()
    print("attenuation,pair,successes,trials,seconds")
    for att in args.attenuation:
        for key, (ref, tgt) in PAIRS.items():
            t0 = time.time()
            ok = 0
            for seed in range(args.trials):
                rot, trans = trial(seed, att, ref, tgt, args.max_shift, args.max_angle)
                ok += rot < 1.0 and trans < 1.0
            print(f"{att},{key},{ok},{args.trials},{time.time() - t0:.0f}", flush=True)


if __name__ == "__main__":
    main()
