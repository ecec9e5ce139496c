"""Compiled vs numpy linearization kernels.

    python benchmarks/bench_kernels.py [--edges 20000] [--repeat 5]

Times the batched per-edge kernels on both backends, checks they agree,
and times one full S1-sized optimization with each backend.
"""
import argparse
import timeit

import numpy as np
from scipy.spatial.transform import Rotation

from twoview_pgo import kernels
from twoview_pgo.graph import AbsoluteLoopEdge, ScaleFreeLoopEdge, chain_from_poses, make_information
from twoview_pgo.optimizer import optimize
from twoview_pgo.se3 import Pose, pose_exp, relative_pose


def batch(n, rng):
    R = lambda: Rotation.random(n, random_state=rng).as_matrix()
    t = lambda: rng.normal(size=(n, 3)) * 5
    d = rng.normal(size=(n, 3))
    return dict(Ra=R(), ta=t(), Rb=R(), tb=t(), Rm=R(), tm=t(),
                dm=d / np.linalg.norm(d, axis=1, keepdims=True), delta=rng.normal(size=(n, 6)) * 0.1)


def loop_graph(n, rng):
    poses = [Pose.identity()]
    for _ in range(n - 1):
        poses.append(poses[-1] @ pose_exp(np.r_[rng.normal(size=3) * 0.05, 1.0, 0, 0]))
    noisy = [poses[0]]
    for a, b in zip(poses, poses[1:]):
        noisy.append(noisy[-1] @ relative_pose(a, b) @ pose_exp(rng.normal(size=6) * 0.01))
    g = chain_from_poses(noisy)
    info = make_information(np.full(6, 100.0))
    for i in range(0, n - 20, 3):
        j = i + 20
        rel = relative_pose(poses[i], poses[j])
        g.add_edge(AbsoluteLoopEdge(i, j, rel, info))
        g.add_edge(ScaleFreeLoopEdge(i, j, rel.R, rel.t / np.linalg.norm(rel.t), info))
    return g


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--edges", type=int, default=20000)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--nodes", type=int, default=200)
    args = p.parse_args()

    if kernels.compiled is None:
        print("compiled kernels not built; only the numpy backend is available")
    backends = ["python"] + (["compiled"] if kernels.compiled is not None else [])
    rng = np.random.default_rng(0)
    b = batch(args.edges, rng)
    calls = {
        "absolute_terms": lambda be: kernels.absolute_terms(b["Ra"], b["ta"], b["Rb"], b["tb"],
                                                            b["Rm"], b["tm"], backend=be),
        "scale_free_terms": lambda be: kernels.scale_free_terms(b["Ra"], b["ta"], b["Rb"], b["tb"],
                                                                b["Rm"], b["dm"], backend=be),
        "retract": lambda be: kernels.retract(b["Ra"], b["ta"], b["delta"], backend=be),
    }
    print(f"{'kernel':<18}{'backend':<10}{'ms/call':>10}{'us/edge':>10}{'speedup':>9}  max|diff|")
    for name, fn in calls.items():
        base = None
        ref = fn("python")
        for be in backends:
            best = min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat))
            base = base or best
            diff = max(np.max(np.abs(x - y)) for x, y in zip(ref, fn(be)))
            print(f"{name:<18}{be:<10}{best * 1e3:>10.2f}{best / args.edges * 1e6:>10.3f}"
                  f"{base / best:>8.1f}x  {diff:.1e}")

    g = loop_graph(args.nodes, rng)
    print(f"\noptimize: {args.nodes} nodes, {len(g.edges)} edges")
    for be in backends:
        best = min(timeit.repeat(lambda: optimize(g, backend=be), number=1, repeat=3))
        print(f"  {be:<10}{best:.3f} s")


if __name__ == "__main__":
    main()
