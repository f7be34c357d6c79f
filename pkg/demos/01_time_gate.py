"""How the time gate opens and closes.

Samples the gate of three units with different periods and phase shifts,
prints a coarse text plot of each, and measures how often each unit is open.

    python demos/01_time_gate.py
"""

import numpy as np

from phased_lstm.cells import LEAK, gate_values

R_ON, ALPHA = 0.05, 0.001
UNITS = [(2.0, 0.0), (3.0, 1.0), (5.0, 2.5)]  # (tau, s)


def strip(k: np.ndarray, width: int = 100) -> str:
    # one character per bin: the largest openness seen inside it
    bins = np.array_split(k, width)
    return "".join(" .:-=+*#%@"[min(9, int(b.max() * 9.999))] for b in bins)


def main():
    t = np.arange(0.0, 20.0, 0.001)
    tau = np.array([u[0] for u in UNITS])
    s = np.array([u[1] for u in UNITS])
    phi, k, branch = gate_values(t, tau, s, R_ON, ALPHA)
    print(f"openness k over t in [0, 20), r_on={R_ON}, leak={ALPHA}\n")
    for j, (tj, sj) in enumerate(UNITS):
        print(f"tau={tj:<4} s={sj:<4} |{strip(k[:, j])}|")
    print()
    for j, (tj, _) in enumerate(UNITS):
        frac = np.mean(branch[:, j] != LEAK)
        print(f"unit {j}: open {frac:.4f} of the time, peak k = {k[:, j].max():.6f}")
    print("\nEach unit is open for r_on of its own period, wherever its phase sits.")


if __name__ == "__main__":
    main()
