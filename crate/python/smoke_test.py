#!/usr/bin/env python3
"""Smoke test for the Python bindings.

Builds the extension module, then drives the whole surface once: synthetic
data generation, training, evaluation, explanation, numeric self-check, and
checkpoint round-tripping. Exits non-zero on the first failed assertion.

Usage, from the repository root:

    python3 python/smoke_test.py

Set ADLGRAPH_SKIP_BUILD=1 to reuse an already-built module.
"""

import os
import shutil
import subprocess
import sys
import sysconfig
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build_module() -> str:
    """Compiles the extension and stages it as an importable `adlgraph` module."""
    if not os.environ.get("ADLGRAPH_SKIP_BUILD"):
        subprocess.run(
            ["cargo", "build", "-p", "adlgraph-py", "--features", "extension-module"],
            cwd=ROOT,
            check=True,
        )
    built = os.path.join(ROOT, "target", "debug", "libadlgraph_py.so")
    if not os.path.exists(built):  # e.g. macOS
        built = os.path.join(ROOT, "target", "debug", "libadlgraph_py.dylib")
    stage = tempfile.mkdtemp(prefix="adlgraph-py-")
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    shutil.copy2(built, os.path.join(stage, f"adlgraph{suffix}"))
    sys.path.insert(0, stage)
    return stage


def main() -> None:
    build_module()
    import adlgraph

    print(f"adlgraph {adlgraph.__version__} loaded")

    # Data generation.
    windows = adlgraph.Windows.synthetic(classes=3, windows_per_class=40, seed=11)
    assert len(windows) == 120, len(windows)
    labels = windows.label_names
    assert len(labels) == 3, labels
    counts = windows.class_counts()
    assert all(counts[name] == 40 for name in labels), counts
    nodes, arcs = windows.graph_stats(0)
    assert nodes > 0 and arcs > 0, (nodes, arcs)
    print(f"synthetic corpus: {len(windows)} windows, classes {labels}")

    # File round trip.
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "windows.json")
        windows.save(path)
        reloaded = adlgraph.Windows.load(path)
        assert len(reloaded) == len(windows)

    # Training (small settings: this is a smoke test, not a benchmark).
    model, summary = adlgraph.train(
        windows,
        seed=11,
        learning_rate=0.005,
        max_epochs=60,
        batch_size=8,
        embed_dim=8,
        hidden_dim=16,
    )
    assert summary["epochs_run"] <= 60, summary
    print(
        f"trained: {summary['epochs_run']} epochs, "
        f"best val loss {summary['best_val_loss']:.4f}"
    )

    # Evaluation on the held-out test split.
    metrics = model.evaluate(windows)
    assert 0.0 <= metrics["accuracy"] <= 1.0, metrics
    assert metrics["accuracy"] >= 0.5, f"degenerate accuracy: {metrics['accuracy']}"
    print(f"test accuracy {metrics['accuracy']:.3f}, weighted F1 {metrics['weighted_f1']:.3f}")

    # Prediction and explanation of one window.
    predicted, probs = model.predict(windows, 0)
    assert predicted in labels and abs(sum(probs) - 1.0) < 1e-9, (predicted, probs)
    explanation = model.explain(windows, 0, runs=4, epochs=40, seed=3)
    assert explanation["text"].startswith("I predicted "), explanation["text"]
    assert explanation["path"], "empty explanation path"
    assert explanation["nodes"], "no node scores"
    print(f"explanation: {explanation['text']}")

    # Determinism: same seed, same sentence.
    again = model.explain(windows, 0, runs=4, epochs=40, seed=3)
    assert again["text"] == explanation["text"], "explanation not deterministic"

    # Checkpoint round trip.
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "checkpoint.json")
        model.save(path)
        reloaded = adlgraph.Model.load(path)
        assert reloaded.predict(windows, 5) == model.predict(windows, 5)

    # Numeric self-check (small budget).
    checks = adlgraph.selfcheck(seed=3, fuzz_cases=25)
    failed = [name for name, passed, _ in checks if not passed]
    assert not failed, f"selfcheck failures: {failed}"
    print(f"selfcheck: {len(checks)} checks passed")

    print("smoke test passed")


if __name__ == "__main__":
    main()
