"""
This file is for defining enumerations shared across the distillation pipeline.

The `Strategy` enum selects how the teacher and student are trained together:
- GUIDED: pre-train teacher, burn-in the student with the frozen teacher, then EMA distillation,
- STANDARD_BURNIN: burn-in the student on labeled data only, copy it to the teacher, then EMA,
- FIXED_TEACHER: pre-train teacher and keep it frozen for the whole run,
- NO_BURNIN: copy the fresh student to the teacher at iteration 0 and go straight to EMA,
- SUPERVISED_ONLY: labeled data only, no teacher at all.

The `Stage` enum names the phase a TrainState is currently in.

The `AugmentMode` enum selects how the teacher and student views of an unlabeled image differ.

The `EmptyPseudoPolicy` enum decides what an unlabeled image with no surviving pseudo-labels
contributes to the unsupervised loss.

Values are plain strings so they round-trip through JSON configs and the command line.
"""

from enum import Enum

class Strategy(str, Enum):
    GUIDED = "guided"
    STANDARD_BURNIN = "standard_burnin"
    FIXED_TEACHER = "fixed_teacher"
    NO_BURNIN = "no_burnin"
    SUPERVISED_ONLY = "supervised_only"

class Stage(str, Enum):
    TEACHER_PRETRAIN = "teacher_pretrain"
    BURN_IN = "burn_in"
    DISTILL = "distill"

class AugmentMode(str, Enum):
    OURS = "ours"
    POLITE_TEACHER_CUTOUT = "polite_teacher_cutout"
    SAME_AS_TEACHER = "same_as_teacher"
    NONE = "none"

class EmptyPseudoPolicy(str, Enum):
    SKIP = "skip"
    NO_OBJECT = "no_object"

class EvalModel(str, Enum):
    STUDENT = "student"
    TEACHER = "teacher"

class AblationAxis(str, Enum):
    BURNIN_STRATEGY = "burnin_strategy"
    AUGMENTATION = "augmentation"
    LAMBDA_U = "lambda_u"

class PlotKind(str, Enum):
    AP_VS_LABELS = "ap_vs_labels"
    TRAINING_CURVES = "training_curves"
