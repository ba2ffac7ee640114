"""End to end at desk scale: two class teachers, then a supervised and a distilled student.

Takes a few minutes on one CPU core with the defaults.

    python3 demos/desk_distillation.py --n 40 --teacher-epochs 6 --student-epochs 3
"""
import argparse

import torch

from djkd.arch import TeacherConfig
from djkd.data import synth_generate
from djkd.engine import TrainConfig, distill_student, evaluate, train_supervised, train_teacher
from djkd.losses import PRESETS
from djkd.models import build_student


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=40, help="training images per class")
    parser.add_argument("--resolution", type=int, default=128)
    parser.add_argument("--teacher-epochs", type=int, default=6)
    parser.add_argument("--student-epochs", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    torch.set_num_threads(1)

    res, seed = args.resolution, args.seed
    train = synth_generate(args.n, "benign", res, seed) + synth_generate(args.n, "malignant", res, seed)
    test = synth_generate(max(args.n // 4, 2), "benign", res, seed + 1000) + \
        synth_generate(max(args.n // 4, 2), "malignant", res, seed + 1000)

    teachers = {}
    for cls in ("benign", "malignant"):
        teachers[cls], _ = train_teacher(cls, train, TrainConfig(epochs=args.teacher_epochs, seed=seed),
                                         TeacherConfig.desk(res))
        own = [s for s in test if s.class_label == cls]
        print(f"{cls} teacher: Dice on its own class {evaluate(teachers[cls], own).dice:.4f}")

    cfg = TrainConfig(epochs=args.student_epochs, seed=seed)
    supervised, _ = train_supervised(build_student(seed=seed), train, cfg)
    distilled, history = distill_student(build_student(seed=seed), train, PRESETS["double_teacher"], cfg,
                                         teachers["benign"], teachers["malignant"])
    print(history.to_csv())
    for name, net in (("supervised student", supervised), ("distilled student", distilled)):
        r = evaluate(net, test)
        print(f"{name:<20s} Dice {r.dice:.4f}  mIoU {r.miou:.4f}  accuracy {r.accuracy:.4f}")


if __name__ == "__main__":
    main()
