"""Counting how many state updates a Phased LSTM actually performs.

Runs an untrained phased model and a dense LSTM over the same
densely sampled sine waves and compares per-unit update counts.

    python demos/03_sparse_updates.py
"""

from phased_lstm import ModelConfig, evaluate, gen_dataset, init_model
from phased_lstm.tasks import FreqTaskConfig


def main():
    ds = gen_dataset(FreqTaskConfig(sampling="oversampled_0p1ms"), 60, 0, test_fraction=0)
    dense = evaluate(init_model(ModelConfig(hidden=64, cell_kind="lstm"), 0), ds.train)
    phased = evaluate(init_model(ModelConfig(hidden=64), 0), ds.train)
    print(f"{len(ds.train)} sequences, {dense.event_total} events in total")
    print(f"dense LSTM : {dense.updates_per_neuron:8.1f} updates per unit and sequence")
    print(f"phased LSTM: {phased.updates_per_neuron:8.1f} updates per unit and sequence")
    print(f"ratio {phased.updates_per_neuron / dense.updates_per_neuron:.4f} (r_on = 0.05)")
    print("\nClosed units can be skipped outright at inference; evaluate() does so.")


if __name__ == "__main__":
    main()
