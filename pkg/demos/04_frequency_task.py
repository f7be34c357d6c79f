"""A short frequency-discrimination run: phased vs plain LSTM.

Trains both models for a few epochs on the oversampled (0.1 ms) condition,
where every sequence has hundreds of events.  This is a small budget demo;
the full protocol lives in configs/ and tests/test_acceptance.py.

    python demos/04_frequency_task.py [epochs]
"""

import sys
import time

from phased_lstm import ModelConfig, TrainConfig, gen_dataset, init_model, train
from phased_lstm.tasks import FreqTaskConfig


def main(epochs: int = 5):
    ds = gen_dataset(FreqTaskConfig(sampling="oversampled_0p1ms"), 300, 0)
    print(f"{len(ds.train)} train / {len(ds.test)} test sequences, {epochs} epochs, hidden 16\n")
    for label, cfg in [
        ("phased LSTM", ModelConfig(hidden=16)),
        ("LSTM + time", ModelConfig(hidden=16, cell_kind="lstm", time_as_feature=True)),
    ]:
        model = init_model(cfg, 0)
        t0 = time.perf_counter()
        report = train(model, ds, TrainConfig(epochs=epochs, batch_size=8))
        accs = " ".join(f"{e.test['accuracy']:.2f}" for e in report.epochs)
        print(f"{label}: test accuracy per epoch {accs}  ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
