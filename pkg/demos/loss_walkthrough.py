"""Worked values of every loss term, then one composite distillation loss.

    python3 demos/loss_walkthrough.py
"""
import torch

from djkd.losses import PRESETS, PredictionBundle, cross_entropy, dice_loss, iou_loss, kl_divergence, \
    total_loss_terms


def row(*values):
    return torch.tensor(values, dtype=torch.float64).reshape(1, 1, 1, -1)


def main():
    print("binary cross-entropy  q=(0.8, 0.2)  y=(1, 0)      ",
          f"{cross_entropy(row(0.8, 0.2), row(1.0, 0.0)).item():.5f}")
    print("dice loss             q=(1,0,1,0)   y=(1,0,0,0)   ",
          f"{dice_loss(row(1.0, 0.0, 1.0, 0.0), row(1.0, 0.0, 0.0, 0.0), smooth=0.0).item():.5f}")
    print("iou loss              q=(1,1,0,0)   y=(1,0,0,0)   ",
          f"{iou_loss(row(1.0, 1.0, 0.0, 0.0), row(1.0, 0.0, 0.0, 0.0)).item():.5f}")
    print("kl divergence         p=0.9         q=0.5         ",
          f"{kl_divergence(row(0.9), row(0.5)).item():.5f}")

    # a random 16x16 image scored against two imagined teachers
    g = torch.Generator().manual_seed(0)
    student = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64)
    mask = (torch.rand(1, 1, 16, 16, generator=g) > 0.7).double()
    bundle = PredictionBundle(student, mask,
                              benign=torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64),
                              malignant=torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64))
    print()
    for name, weights in PRESETS.items():
        terms = total_loss_terms(bundle, weights)
        parts = "  ".join(f"{k}={v.item():.4f}" for k, v in terms.items())
        print(f"{name:<15s} {parts}")


if __name__ == "__main__":
    main()
