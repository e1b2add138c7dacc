"""Train on the synthetic attribute-control benchmark and watch context work.

Builds a small text-mode task (four attributes, 38 valid combinations,
every training sample annotated with natural-language context), trains
the parallel-cross-attention model and the context-free baseline with
identical seeds, then compares how well each one emits the requested
attribute markers.  Runs in a couple of minutes on a laptop CPU.

    python demos/attribute_control.py
"""

import tempfile
from pathlib import Path

from ctxmt.evalbench import (
    ControlSpec, control_accuracy, make_control_task, train_on_task,
)
from ctxmt.trainer import TrainConfig


def main():
    print("building control task (3800 train / 380 valid / 380 test) ...")
    task = make_control_task(
        ControlSpec(n_train=3800, n_valid=380, n_test=380), seed=0)
    sample = task.samples["train"][0]
    print(f"  example source : {sample.src}")
    print(f"  example target : {sample.tgt}")
    print(f"  its contexts   : {list(sample.meta_context)}")

    tc = TrainConfig(learning_rate=2e-3, batch_tokens=2048, warmup_steps=60,
                     max_epochs=6, patience=6, microbatch_samples=64, seed=0)
    with tempfile.TemporaryDirectory() as tmp:
        print("\ntraining the contextual model ...")
        mtcue, run = train_on_task(task, "mtcue", tc, Path(tmp) / "mtcue")
        print(f"  valid loss per epoch: "
              f"{', '.join(f'{s.valid_loss:.3f}' for s in run.history)}")
        print("training the context-free baseline ...")
        base, run_b = train_on_task(task, "base", tc, Path(tmp) / "base")
        print(f"  valid loss per epoch: "
              f"{', '.join(f'{s.valid_loss:.3f}' for s in run_b.history)}")

    res_m = control_accuracy(mtcue, task, split="test")
    res_b = control_accuracy(base, task, split="test")
    chance = 1.0 / 38.0
    print(f"\nexact-match accuracy, all four attributes at once:")
    print(f"  contextual : {res_m.exact:.3f}")
    print(f"  baseline   : {res_b.exact:.3f}   (chance = {chance:.3f})")
    print("per attribute (contextual):")
    for name, acc in res_m.per_attribute.items():
        print(f"  {name:10s} {acc:.3f}")

    row = task.samples["test"][0]
    want = task.requested[row.sample_id]
    print(f"\none test sample: src = {row.src!r}")
    print(f"  requested combination : {tuple(want)}")
    print(f"  contextual decode     : {' '.join(res_m.hypotheses[0])}")
    print(f"  baseline decode       : {' '.join(res_b.hypotheses[0])}")


if __name__ == "__main__":
    main()
