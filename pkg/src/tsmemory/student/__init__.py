from .model import (
    GradCheckReport,
    ParameterStore,
    StaleCacheError,
    StudentConfig,
    StudentModel,
    grad_check,
    init_params,
    student_backward,
    student_forward,
)
from .trainer import TrainerConfig, TrainReport, TrainingDivergedError, train_student, validation_pinball

__all__ = [
    "GradCheckReport", "ParameterStore", "StaleCacheError", "StudentConfig", "StudentModel",
    "TrainReport", "TrainerConfig", "TrainingDivergedError", "grad_check", "init_params",
    "student_backward", "student_forward", "train_student", "validation_pinball",
]
