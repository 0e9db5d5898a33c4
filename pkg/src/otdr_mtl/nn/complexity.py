"""Weight accounting: closed-form estimates next to the enumerated parameter count."""
from __future__ import annotations

from dataclasses import dataclass

from .model import TASKS, ArchSpec


def lstm_weight_formula(n_c: int, n_inp: int, n_out: int) -> int:
    """``4 n_c^2 + 4 n_inp n_c + n_c n_out + 3 n_c`` (recurrent, input, output projection, peepholes)."""
    return 4 * n_c * n_c + 4 * n_inp * n_c + n_c * n_out + 3 * n_c


def task_weight_formula(j: int, n_out: int, n_task_out: int) -> int:
    """``j (n_out + n_task_out)`` for one tower of width ``j``."""
    return j * (n_out + n_task_out)


@dataclass(frozen=True)
class WeightCount:
    w_lstm: int
    w_task: dict[str, int]
    total: int
    # enumerated from the implementation
    lstm_matrices: int
    lstm_biases: int
    task_matrices: dict[str, int]
    task_biases: dict[str, int]
    enumerated_total: int


def count_weights(arch: ArchSpec, n_out: int | None = None) -> WeightCount:
    """Formula counts with ``n_out`` defaulting to the encoder width fed to the towers.

    The formula's ``n_c n_out`` and ``3 n_c`` terms describe an output
    projection and peephole weights this cell does not have; its remaining
    terms equal the enumerated LSTM matrices exactly.  The tower formula
    equals the enumerated tower matrices of a depth-1 tower.  Biases are
    reported separately.
    """
    n_out = arch.n_enc if n_out is None else n_out
    w_lstm = lstm_weight_formula(arch.n_c, arch.n_inp, n_out)
    w_task = {t: task_weight_formula(arch.tower_width, n_out, arch.n_task_out) for t in TASKS}
    shapes = arch.param_shapes()
    lstm_mat = sum(_size(s) for k, s in shapes.items() if k.startswith("lstm.") and len(s) == 2)
    lstm_bias = _size(shapes["lstm.b"])
    task_mat = {t: sum(_size(s) for k, s in shapes.items() if k.startswith(t + ".") and len(s) == 2)
                for t in TASKS}
    task_bias = {t: sum(_size(s) for k, s in shapes.items() if k.startswith(t + ".") and len(s) == 1)
                 for t in TASKS}
    return WeightCount(
        w_lstm=w_lstm,
        w_task=w_task,
        total=w_lstm + sum(w_task.values()),
        lstm_matrices=lstm_mat,
        lstm_biases=lstm_bias,
        task_matrices=task_mat,
        task_biases=task_bias,
        enumerated_total=sum(_size(s) for s in shapes.values()),
    )


def _size(shape) -> int:
    out = 1
    for d in shape:
        out *= d
    return out
