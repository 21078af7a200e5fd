"""Time the compiled kernels against their pure-Python twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Also times one full training step per backend, which shows how much of the
step the kernels account for.
"""
import argparse
import timeit

import numpy as np

from overlapdet import kernels
from overlapdet.harness.scene import micro_scene
from overlapdet.harness.training import TrainConfig, init_params, select_references, train_step


def cases(rng):
    cost6 = rng.uniform(size=(6, 6))
    cost30 = rng.uniform(size=(30, 30))
    grid = rng.normal(size=(32, 32, 8))
    xs, ys = rng.uniform(size=(2, 30))
    a = np.column_stack([rng.uniform(0.2, 0.8, (30, 2)), rng.uniform(0.05, 0.4, (30, 2))])
    b = np.column_stack([rng.uniform(0.2, 0.8, (4, 2)), rng.uniform(0.05, 0.4, (4, 2))])
    return {
        "assignment 6x6": lambda impl: kernels.linear_assignment(cost6, impl),
        "assignment 30x30": lambda impl: kernels.linear_assignment(cost30, impl),
        "bilinear 30 points": lambda impl: kernels.bilinear_sample(grid, xs, ys, impl),
        "pairwise giou 30x4": lambda impl: kernels.pairwise_giou(a, b, True, impl),
    }


def best_of(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def step_time(backend, repeat):
    saved = kernels._impl
    kernels._impl = kernels.backend_module(backend)
    try:
        cfg = TrainConfig()
        scene = micro_scene()
        params, sel = init_params(cfg), select_references(scene, cfg)
        return best_of(lambda: train_step(params, scene, sel, cfg), repeat)
    finally:
        kernels._impl = saved


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends) + "     speedup")
    rows = [(name, fn) for name, fn in cases(np.random.default_rng(0)).items()]
    rows.append(("training step", None))
    for name, fn in rows:
        times = [step_time(b, args.repeat) if fn is None else best_of(lambda: fn(b), args.repeat)
                 for b in backends]
        speed = f"{times[0] / times[-1]:>9.1f}x" if len(times) > 1 else ""
        print(f"{name:<22}" + "".join(f"{t * 1e6:>10.1f}us" for t in times) + speed)


if __name__ == "__main__":
    main()
