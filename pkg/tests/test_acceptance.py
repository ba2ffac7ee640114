"""Acceptance gate: one test per criterion, each at its stated tolerance and time budget.

A summary line per criterion is printed at the end of the pytest run.
"""
import json
import math
import time

import pytest
import torch

import oracles
from test_losses import gradient_check_instances, rel_close
from test_metrics import metric_mismatches
from djkd.arch import TeacherConfig, student_arch, teacher_arch, unet_reference_arch
from djkd.cli import ABLATION_COLUMNS, ABLATION_ROWS, cmd_ablation
from djkd.complexity import BYTES_PER_PARAM, MIB, analyze, size_mib
from djkd.config import config_from_dict
from djkd.data import DatasetRecord, SplitPlan, make_splits, synth_generate
from djkd.engine import PlateauSchedule, TrainConfig, distill_student, evaluate, train_supervised, train_teacher
from djkd.losses import PRESETS, cross_entropy, dice_loss, iou_loss, kl_divergence
from djkd.models import build_student


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f} s, budget {self.seconds} s"


def t(values):
    return torch.tensor(values, dtype=torch.float64).reshape(1, 1, 1, -1)


@pytest.mark.criterion(1, "complexity calibration: reference U-Net")
def test_criterion_1_reference_unet_calibration():
    with Budget(1.0):
        r = analyze(unet_reference_arch(), 512)
    assert abs(r.params - 34.5e6) <= 0.03 * 34.5e6
    assert abs(r.gflops - 262.08) <= 0.03 * 262.08
    # size follows the 4-byte / 2**20 convention exactly; 34.5e6 parameters is 131.6 MiB
    assert r.size_mib == r.params * BYTES_PER_PARAM / MIB
    assert f"{size_mib(34.5e6):.1f}" == "131.6"
    assert round(r.size_mib) == 132
    assert abs(r.size_mib - 131.6) <= 0.03 * 131.6


@pytest.mark.criterion(2, "student budget")
def test_criterion_2_student_budget():
    with Budget(1.0):
        r = analyze(student_arch(), 512)
    assert abs(r.params - 2.2e6) <= 0.15 * 2.2e6
    assert abs(r.gflops - 16.59) <= 0.15 * 16.59
    assert abs(r.size_mib - 8.4) <= 0.15 * 8.4


@pytest.mark.criterion(3, "teacher budget")
def test_criterion_3_teacher_budget():
    with Budget(1.0):
        r = analyze(teacher_arch(), 512)
    assert abs(r.params - 106.1e6) <= 0.15 * 106.1e6


@pytest.mark.criterion(4, "loss oracle suite")
def test_criterion_4_loss_oracles():
    with Budget(60.0):
        worked = {
            "bce": (cross_entropy(t([0.8, 0.2]), t([1.0, 0.0])).item(), oracles.bce([0.8, 0.2], [1, 0]), 0.22314),
            "dice": (dice_loss(t([1.0, 0.0, 1.0, 0.0]), t([1.0, 0.0, 0.0, 0.0]), smooth=0.0).item(),
                     oracles.dice([1, 0, 1, 0], [1, 0, 0, 0], smooth=0.0), 0.26667),
            "iou": (iou_loss(t([1.0, 1.0, 0.0, 0.0]), t([1.0, 0.0, 0.0, 0.0])).item(),
                    oracles.iou([1, 1, 0, 0], [1, 0, 0, 0]), 0.69315),
            "kl": (kl_divergence(t([0.9]), t([0.5])).item(), oracles.kl([0.9], [0.5]), 0.36806),
        }
        for name, (got, oracle, stated) in worked.items():
            assert abs(got - oracle) <= 1e-5, name
            assert abs(oracle - stated) <= 1e-5, name
        failures = [name for name, a, n in gradient_check_instances(50, seed=0) if not rel_close(a, n)]
    assert not failures, failures


@pytest.mark.criterion(5, "metric oracle suite")
def test_criterion_5_metric_oracles():
    with Budget(60.0):
        bad_oracle, bad_f1 = metric_mismatches(1000, seed=0)
    assert bad_oracle == 0
    assert bad_f1 == 0


@pytest.mark.criterion(6, "overfit check")
def test_criterion_6_overfit():
    samples = synth_generate(4, "benign", 128, seed=0) + synth_generate(4, "malignant", 128, seed=0)
    student = build_student(seed=0)
    config = TrainConfig(lr=1e-3, batch_size=8, epochs=300, max_steps=300, seed=0)
    with Budget(600.0):
        _, history = train_supervised(student, samples, config,
                                      callback=lambda h: evaluate(student, samples).dice >= 0.95)
        report = evaluate(student, samples)
    print(f"overfit: {len(history)} steps, train Dice {report.dice:.4f}")
    assert len(history) <= 300
    assert report.dice >= 0.95


DISTILL_SEED = 0
TEACHER_EPOCHS = 15
STUDENT_EPOCHS = 4


@pytest.mark.slow
@pytest.mark.criterion(7, "distillation direction check")
def test_criterion_7_distillation_direction():
    train = synth_generate(100, "benign", 128, DISTILL_SEED) + synth_generate(100, "malignant", 128, DISTILL_SEED)
    test = synth_generate(25, "benign", 128, DISTILL_SEED + 1000) + \
        synth_generate(25, "malignant", 128, DISTILL_SEED + 1000)
    assert (len(train), len(test)) == (200, 50)
    with Budget(1800.0):
        teacher_cfg = TrainConfig(epochs=TEACHER_EPOCHS, seed=DISTILL_SEED)
        benign, _ = train_teacher("benign", train, teacher_cfg, TeacherConfig.desk())
        malignant, _ = train_teacher("malignant", train, teacher_cfg, TeacherConfig.desk())
        frozen = [{k: v.clone() for k, v in h.net.state_dict().items()} for h in (benign, malignant)]

        student_cfg = TrainConfig(epochs=STUDENT_EPOCHS, seed=DISTILL_SEED)
        supervised, _ = train_supervised(build_student(seed=DISTILL_SEED), train, student_cfg)
        distilled, _ = distill_student(build_student(seed=DISTILL_SEED), train, PRESETS["double_teacher"],
                                       student_cfg, benign, malignant)
        sup_dice = evaluate(supervised, test).dice
        dist_dice = evaluate(distilled, test).dice
    print(f"distillation: supervised {sup_dice:.4f}, double teacher {dist_dice:.4f}")
    for before, handle in zip(frozen, (benign, malignant)):
        after = handle.net.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)
    assert dist_dice >= sup_dice - 0.01


@pytest.mark.criterion(8, "schedule and determinism")
def test_criterion_8_schedule_and_determinism():
    with Budget(300.0):
        sched = PlateauSchedule(1e-3, patience=3, factor=0.1)
        lrs = [sched.step(1.0) for _ in range(4)]
        assert lrs[:3] == [1e-3, 1e-3, 1e-3]
        assert math.isclose(lrs[3], 1e-4, rel_tol=1e-12)

        samples = synth_generate(8, "benign", 64, seed=1) + synth_generate(8, "malignant", 64, seed=1)
        config = TrainConfig(epochs=3, batch_size=4, seed=11, augment=True)

        def run():
            _, h = train_supervised(build_student(seed=11), samples, config, val=samples[:4])
            return h

        a, b = run(), run()
    assert len(a) == len(b) == 3
    for ra, rb in zip(a.records, b.records):
        for field in ("total", "wb", "lr", "dice", "miou"):
            assert abs(getattr(ra, field) - getattr(rb, field)) <= 1e-6


@pytest.mark.slow
@pytest.mark.criterion(9, "ablation harness")
def test_criterion_9_ablation(tmp_path):
    raw = {
        "data": {"resolution": 128, "synthetic": {"n_per_class": 20}, "augment": False},
        "model": {"teacher": {"stem_width": 16, "blocks": [1, 1, 1, 1], "decoder_widths": [256, 128, 64, 32]}},
        "train": {"teacher": {"epochs": 2}},
        "seed": 42,
        "output_dir": str(tmp_path / "ablation"),
    }
    cfg = config_from_dict(raw)
    with Budget(1800.0):
        rows = cmd_ablation(cfg)
    csv_lines = (tmp_path / "ablation" / "reports" / "ablation.csv").read_text().splitlines()
    assert csv_lines[0] == ",".join(ABLATION_COLUMNS)
    assert len(csv_lines) == 1 + 7
    assert [(r["train"], r["test"]) for r in rows] == list(ABLATION_ROWS)
    # independent re-derivation of every row's split
    records = [json.loads(line) for line in (tmp_path / "ablation" / "manifest.jsonl").read_text().splitlines()]
    assert len(records) == 40
    recs = [DatasetRecord.from_dict(r) for r in records]
    for row in rows:
        train, test = make_splits(recs, SplitPlan.named(row["train"], row["test"], 0.8, 42))
        assert not {r.ident for r in train} & {r.ident for r in test}
        assert (len(train), len(test)) == (row["n_train"], row["n_test"])
    by_key = {(r["train"], r["test"]): r for r in rows}
    assert by_key[("all", "all")]["n_train"] == by_key[("benign", "benign")]["n_train"] + \
        by_key[("malignant", "malignant")]["n_train"]
    assert all(0.0 <= r["dice"] <= 1.0 for r in rows)
