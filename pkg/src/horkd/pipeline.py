"""Teacher -> assistant -> student knowledge transfer.

``run_stage`` is one distillation stage: the frozen acting teacher sees the
high-resolution images, the trainable student sees the (possibly degraded)
ones, and plain SGD minimizes ce_weight * cross-entropy plus the weighted
relational losses.  Class centers come from the acting teacher over the
full training set, once per stage, before any step.

``run_two_stage`` chains a cross-structure stage (teacher -> assistant at
full resolution) with a cross-resolution stage (frozen assistant -> student
on degraded inputs).  ``kd_soft_baseline`` is the classic soft-target
comparison row.

Seeds: the stage seed drives mini-batch shuffling; triplet subsampling for
step t uses seed plan.seed * 100003 + t; stage 2 of run_two_stage uses
hyper.seed + 1000003.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import topk_error
from .losses import (
    FeatureBatch,
    LossWeights,
    compute_class_centers,
    total_distill_loss,
)
from .models import ImageBatch, Model, ModelSpec, build_model, degrade, forward

_STAGE2_SEED_OFFSET = 1000003
_TRIPLET_SEED_STRIDE = 100003

REPORT_COLUMNS = ("epoch", "ce", "l1", "l2", "l3", "lc", "total",
                  "train_acc", "test_acc")


@dataclass
class StagePlan:
    kind: str  # "cross_structure" | "cross_resolution"
    teacher: Model
    student_spec: ModelSpec
    degrade_factor: int
    weights: LossWeights
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    ce_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cross_structure", "cross_resolution"):
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.kind == "cross_structure" and self.degrade_factor != 1:
            raise ValueError("cross_structure stages keep full resolution "
                             f"(degrade_factor 1), got {self.degrade_factor}")
        if self.kind == "cross_resolution" and self.degrade_factor < 2:
            raise ValueError("cross_resolution stages need degrade_factor >= 2, "
                             f"got {self.degrade_factor}")
        if self.weights.beta > 0 and self.batch_size < 3:
            raise ValueError(f"triplet term needs batch_size >= 3, "
                             f"got {self.batch_size}")
        if self.weights.alpha > 0 and self.batch_size < 2:
            raise ValueError(f"pairwise term needs batch_size >= 2, "
                             f"got {self.batch_size}")


@dataclass
class StepRecord:
    epoch: int
    step: int
    ce: float
    l1: float
    l2: float
    l3: float
    lc: float
    total: float


@dataclass
class EpochRecord:
    epoch: int
    ce: float
    l1: float
    l2: float
    l3: float
    lc: float
    total: float
    train_acc: float
    test_acc: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    checkpoint_path: str | None = None

    @property
    def final_test_acc(self) -> float:
        return self.epochs[-1].test_acc if self.epochs else 0.0


def write_report_csv(report: TrainReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for rec in report.epochs:
            writer.writerow([rec.epoch] + [f"{v:.17g}" for v in
                            (rec.ce, rec.l1, rec.l2, rec.l3, rec.lc, rec.total,
                             rec.train_acc, rec.test_acc)])


def read_report_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != REPORT_COLUMNS:
            raise ValueError(f"unexpected report header {header}")
        return [EpochRecord(int(row[0]), *[float(v) for v in row[1:]])
                for row in reader]


def evaluate_accuracy(model: Model, batch: ImageBatch) -> float:
    _, logits = forward(model, batch)
    return 1.0 - topk_error(logits, batch.labels, 1)


def _sgd_step(model: Model, learning_rate: float) -> None:
    for p in model.parameters:
        if p.grad is not None:
            p.values -= learning_rate * p.grad


def run_stage(plan: StagePlan, train: ImageBatch, test: ImageBatch,
              initial_student: Model | None = None,
              epoch_hook=None) -> tuple[Model, TrainReport]:
    """Train one student against a frozen acting teacher.

    The final ragged mini-batch of each epoch is dropped so every step's
    relational tuple sets are well-defined.  ``initial_student`` overrides
    the seeded fresh build (used when warm-starting from a checkpoint);
    ``epoch_hook(epoch, model, centers)`` is a test observation point.
    """
    if not plan.teacher.frozen:
        raise ValueError("acting teacher must be frozen before distillation")
    if train.labels.max() >= plan.student_spec.num_classes:
        raise ValueError(f"label {train.labels.max()} out of range for "
                         f"{plan.student_spec.num_classes} classes")

    teacher_emb, _ = forward(plan.teacher, train)
    features_all = FeatureBatch(teacher_emb.values, train.labels)
    centers = compute_class_centers(features_all, plan.student_spec.num_classes)

    if initial_student is not None:
        student = Model(plan.student_spec,
                        [T.Tensor(p.values, requires_grad=True)
                         for p in initial_student.parameters])
    else:
        student = build_model(plan.student_spec)
    lr_train = degrade(train, plan.degrade_factor)
    lr_test = degrade(test, plan.degrade_factor)

    report = TrainReport()
    shuffle_rng = np.random.default_rng(plan.seed)
    n = len(train)
    global_step = 0
    for epoch in range(plan.epochs):
        order = shuffle_rng.permutation(n)
        epoch_terms = np.zeros(6)  # ce, l1, l2, l3, lc, total
        n_steps = 0
        for start in range(0, n - plan.batch_size + 1, plan.batch_size):
            sel = order[start:start + plan.batch_size]
            hr_batch = train.subset(sel)
            student_batch = lr_train.subset(sel)

            t_emb, _ = forward(plan.teacher, hr_batch)
            s_emb, s_logits = forward(student, student_batch)
            ce = T.softmax_cross_entropy(s_logits, student_batch.labels)
            distill, breakdown = total_distill_loss(
                t_emb.values, s_emb, centers, plan.weights,
                seed=plan.seed * _TRIPLET_SEED_STRIDE + global_step)
            loss = T.add(T.scale(ce, plan.ce_weight), distill)
            T.backward(loss)
            _sgd_step(student, plan.learning_rate)

            record = StepRecord(epoch=epoch, step=global_step,
                                ce=ce.item(), l1=breakdown.l1, l2=breakdown.l2,
                                l3=breakdown.l3, lc=breakdown.lc,
                                total=loss.item())
            report.steps.append(record)
            epoch_terms += (record.ce, record.l1, record.l2, record.l3,
                            record.lc, record.total)
            n_steps += 1
            global_step += 1

        means = epoch_terms / max(n_steps, 1)
        report.epochs.append(EpochRecord(
            epoch=epoch, ce=means[0], l1=means[1], l2=means[2], l3=means[3],
            lc=means[4], total=means[5],
            train_acc=evaluate_accuracy(student, lr_train),
            test_acc=evaluate_accuracy(student, lr_test)))
        if epoch_hook is not None:
            epoch_hook(epoch, student, centers)
    return student, report


@dataclass
class StageHyper:
    """Shared per-stage hyperparameters for the multi-stage drivers."""

    weights: LossWeights
    epochs: int
    batch_size: int
    learning_rate: float
    ce_weight: float = 1.0
    seed: int = 0


def run_two_stage(teacher: Model, assistant_spec: ModelSpec,
                  student_spec: ModelSpec, degrade_factor: int,
                  data: tuple[ImageBatch, ImageBatch],
                  hyper: StageHyper) -> tuple[Model, Model, dict[str, TrainReport]]:
    """Cross-structure then cross-resolution transfer.

    Stage 1 distills the teacher into the assistant at full resolution;
    stage 2 freezes the assistant and distills it into the low-resolution
    student.  The acting teacher of each stage sees high-resolution inputs.
    """
    train, test = data
    stage1 = StagePlan(kind="cross_structure", teacher=teacher,
                       student_spec=assistant_spec, degrade_factor=1,
                       weights=hyper.weights, epochs=hyper.epochs,
                       batch_size=hyper.batch_size,
                       learning_rate=hyper.learning_rate,
                       seed=hyper.seed, ce_weight=hyper.ce_weight)
    assistant, report1 = run_stage(stage1, train, test)
    assistant.freeze()

    stage2 = replace(stage1, kind="cross_resolution", teacher=assistant,
                     student_spec=student_spec, degrade_factor=degrade_factor,
                     seed=hyper.seed + _STAGE2_SEED_OFFSET)
    student, report2 = run_stage(stage2, train, test)
    return assistant, student, {"stage1": report1, "stage2": report2}


def kd_soft_baseline(teacher: Model, student_spec: ModelSpec, temperature: float,
                     data: tuple[ImageBatch, ImageBatch], hyper: StageHyper,
                     degrade_factor: int = 1) -> tuple[Model, TrainReport]:
    """Classic soft-target distillation: CE(hard) + T^2 * KL(teacher || student)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not teacher.frozen:
        raise ValueError("acting teacher must be frozen before distillation")
    train, test = data
    student = build_model(student_spec)
    lr_train = degrade(train, degrade_factor)
    lr_test = degrade(test, degrade_factor)

    report = TrainReport()
    shuffle_rng = np.random.default_rng(hyper.seed)
    n = len(train)
    for epoch in range(hyper.epochs):
        order = shuffle_rng.permutation(n)
        ce_sum = kl_sum = 0.0
        n_steps = 0
        for start in range(0, n - hyper.batch_size + 1, hyper.batch_size):
            sel = order[start:start + hyper.batch_size]
            hr_batch = train.subset(sel)
            student_batch = lr_train.subset(sel)

            _, t_logits = forward(teacher, hr_batch)
            _, s_logits = forward(student, student_batch)
            ce = T.softmax_cross_entropy(s_logits, student_batch.labels)
            kl = T.soft_target_kl(s_logits, t_logits.values, temperature)
            loss = T.add(T.scale(ce, hyper.ce_weight), kl)
            T.backward(loss)
            _sgd_step(student, hyper.learning_rate)
            ce_sum += ce.item()
            kl_sum += kl.item()
            n_steps += 1

        steps = max(n_steps, 1)
        # relational columns stay zero; total carries the actual training loss
        report.epochs.append(EpochRecord(
            epoch=epoch, ce=ce_sum / steps, l1=0.0, l2=0.0, l3=0.0, lc=0.0,
            total=(hyper.ce_weight * ce_sum + kl_sum) / steps,
            train_acc=evaluate_accuracy(student, lr_train),
            test_acc=evaluate_accuracy(student, lr_test)))
    return student, report
