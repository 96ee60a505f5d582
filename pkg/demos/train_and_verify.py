"""Train a small watermarked model next to a clean control, then ask the ownership question.

The verification report alone can mislead: a model that sends most inputs to the
target class passes it too. The false-trigger audit tells the two apart. A real
trigger response shows forged WSR well above the clean rate, which should sit
near 1/C.

Run: python demos/train_and_verify.py [epochs]
"""
import sys

from freqmark.attacks import default_registry
from freqmark.codec import forge_watermark_split
from freqmark.data import synth_dataset
from freqmark.metrics import accuracy, wsr
from freqmark.robustness import false_trigger_audit, prune
from freqmark.train import TrainConfig, train
from freqmark.verify import verify_ownership

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 15
train_set = synth_dataset(4, 100, 32, seed=0)
test = synth_dataset(4, 25, 32, seed=1)
holdout = synth_dataset(4, 25, 32, seed=2)
holdout = holdout.replace(ids=holdout.ids + 100_000)
primary, watermark, verification = forge_watermark_split(train_set, 0.1, 90, 0, 0, holdout)

cfg = TrainConfig(epochs=epochs, lr_decay_period=max(1, 2 * epochs // 3))
model, history = train(cfg, primary, watermark, default_registry(False), test, verification)
control, _ = train(cfg, train_set, None, default_registry(False))
for row in history[:: max(1, epochs // 5)]:
    print(f"epoch {row['epoch']:2d}  loss {row['L']:.3f}  acc {row['acc']:.3f}  wsr {row['wsr']:.3f}")

print(f"\nwatermarked: accuracy {accuracy(model, test):.3f}, WSR {wsr(model, verification, 0):.3f}")
print(f"control:     accuracy {accuracy(control, test):.3f}, WSR {wsr(control, verification, 0):.3f}")
report = verify_ownership(model, verification, 0, alpha=1e-3)
print(report.to_markdown())
print("control decision:", verify_ownership(control, verification, 0, alpha=1e-3).decision)

print("\nafter 50% pruning, WSR", round(wsr(prune(model, 0.5), verification, 0), 3))
print("\nfalse-trigger audit on the test split (clean should be near 0.25)")
for row in false_trigger_audit(model, test, 0):
    value = "skipped" if row["wsr"] is None else f"{row['wsr']:.3f}"
    print(f"  {row['forgery']:15s} {value}")
