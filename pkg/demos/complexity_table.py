"""Parameter, size and GFLOP budget of the three bundled networks.

Everything is derived from the layer graphs, so no weights are allocated.

    python3 demos/complexity_table.py --resolution 512
"""
import argparse

from djkd.arch import BUILTIN_ARCHS
from djkd.complexity import analyze


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--resolution", type=int, default=512)
    args = parser.parse_args()

    print(f"{'model':<16s}{'params (M)':>12s}{'size (MiB)':>12s}{'GFLOPs':>10s}")
    for name, make in BUILTIN_ARCHS.items():
        r = analyze(make(), args.resolution)
        print(f"{name:<16s}{r.params / 1e6:>12.1f}{r.size_mib:>12.1f}{r.gflops:>10.2f}")

    # the student is a small fraction of the teacher at any resolution
    teacher, student = analyze(BUILTIN_ARCHS["teacher"](), args.resolution), \
        analyze(BUILTIN_ARCHS["student"](), args.resolution)
    print(f"\nstudent/teacher: {student.params / teacher.params:.1%} of the parameters, "
          f"{student.gflops / teacher.gflops:.1%} of the compute")


if __name__ == "__main__":
    main()
