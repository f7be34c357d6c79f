"""Why a closed gate remembers.

A plain LSTM whose forget gate sits at 0.99 loses its cell state
geometrically.  A Phased LSTM unit whose events all land in the closed
phase (leak off) keeps its state bit for bit, whatever the inputs are.

    python demos/02_memory.py
"""

import math

import numpy as np

from phased_lstm import cells
from phased_lstm.cells import CellState
from phased_lstm.diffmath import Tape

HIDDEN, STEPS, EPS = 3, 500, 0.01


def lstm_decay(c0):
    rng = np.random.default_rng(0)
    a = {k: np.zeros_like(v) for k, v in cells.init_lstm_arrays(1, HIDDEN, rng).items()}
    a.update({p: np.zeros(HIDDEN) for p in cells.PEEPHOLES})
    a["b_f"] = np.full(HIDDEN, math.log((1 - EPS) / EPS))  # forget gate = 1 - eps
    a["b_i"] = np.full(HIDDEN, -800.0)  # nothing written
    tape = Tape(recording=False)
    params, _ = cells.place_params(tape, a)
    state = CellState(tape.const(c0), tape.const(np.zeros_like(c0)), np.zeros(1))
    for _ in range(STEPS):
        state = cells.lstm_step(tape.const(np.zeros((1, 1))), state, params)
    return state.c.value


def phased_closed(c0, h0):
    rng = np.random.default_rng(1)
    a = {k: rng.normal(0, 0.5, v.shape) for k, v in cells.init_lstm_arrays(1, HIDDEN, rng).items()}
    a.update({p: rng.normal(0, 0.5, HIDDEN) for p in cells.PEEPHOLES})
    a.update(tau=np.full(HIDDEN, 10.0), s=np.zeros(HIDDEN), r_on=np.array(0.05), alpha=np.array(0.0))
    tape = Tape(recording=False)
    params, gate = cells.place_params(tape, a)
    state = CellState(tape.const(c0), tape.const(h0), np.full(1, -np.inf))
    for n in range(STEPS):
        t = 10.0 * n + 5.0  # phase 0.5, well inside the closed part of the cycle
        state = cells.phased_lstm_step(tape.const(rng.normal(size=(1, 1))), [t], state, params, gate)
    return state.c.value, state.h.value


def main():
    c0 = np.array([[1.0, -2.0, 0.5]])
    h0 = np.array([[0.1, 0.2, -0.3]])
    c = lstm_decay(c0)
    print(f"LSTM after {STEPS} steps with forget gate {1 - EPS}:")
    print(f"  c       = {c[0]}")
    print(f"  (0.99)^{STEPS} c0 = {cells.memory_decay_closed_form(EPS, STEPS, c0)[0]}")
    c, h = phased_closed(c0, h0)
    print(f"\nPhased LSTM after {STEPS} random inputs, all in the closed phase:")
    print(f"  c unchanged: {np.array_equal(c, c0)}, h unchanged: {np.array_equal(h, h0)}")


if __name__ == "__main__":
    main()
