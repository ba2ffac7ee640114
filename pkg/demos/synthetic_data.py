"""Generate a small synthetic lesion corpus, write it in the BUSI layout and split it.

Benign lesions are smooth ellipses and malignant ones are spiculated stars, so
the two classes differ in shape the way the real ones do.

    python3 demos/synthetic_data.py --out /tmp/synthetic_busi
"""
import argparse
from collections import Counter

from djkd.data import LESION_CLASSES, SplitPlan, make_splits, scan_busi, synth_generate, write_busi_layout


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="synthetic_busi")
    parser.add_argument("--n", type=int, default=10, help="images per class")
    parser.add_argument("--resolution", type=int, default=128)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    samples = [s for cls in LESION_CLASSES for s in synth_generate(args.n, cls, args.resolution, args.seed)]
    for cls in LESION_CLASSES:
        fg = [s.mask.mean() for s in samples if s.class_label == cls]
        print(f"{cls:<10s} {len(fg)} images, mean foreground {sum(fg) / len(fg):.3f}")

    write_busi_layout(samples, args.out)
    records = scan_busi(args.out)
    print(f"\nwrote and rescanned {len(records)} records under {args.out}")

    for train, test in (("all", "all"), ("benign", "malignant")):
        tr, te = make_splits(records, SplitPlan.named(train, test, 0.8, args.seed))
        assert not {r.ident for r in tr} & {r.ident for r in te}
        print(f"train={train:<9s} test={test:<9s} -> {dict(Counter(r.class_label for r in tr))} / "
              f"{dict(Counter(r.class_label for r in te))}")


if __name__ == "__main__":
    main()
