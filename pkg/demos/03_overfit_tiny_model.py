"""Overfit a small encoder on planted-marker comments and watch it learn.

The generator plants a marker token (e.g. TOXMARK) whenever a label is
positive, so a working model+trainer must reach perfect scores quickly.
Runs in well under a minute on a laptop CPU.
"""

from germeval_mtl import data as dt
from germeval_mtl import metrics as mx
from germeval_mtl import model as md
from germeval_mtl import tokenizer as tok
from germeval_mtl import train as tr

examples = dt.synth_generate(120, seed=1, spec=dt.SynthSpec(correlation=0.5, noise=0.0))
print("one generated example:")
print("  ", examples[0].text, "->", examples[0].label_triple())

vocab = tok.build_vocab([e.text for e in examples], max_size=300)
train_ex, val_ex = dt.split(examples, 0.8, seed=3)
train_ds = dt.encode_examples(vocab, train_ex, max_len=24)
val_ds = dt.encode_examples(vocab, val_ex, max_len=24)
print(f"\n{len(train_ds)} train / {len(val_ds)} validation examples, vocab {len(vocab)}")

enc = md.EncoderConfig(vocab_size=len(vocab), d_model=64, n_layers=2, n_heads=4,
                       d_ff=128, max_seq_len=24, dropout=0.1)
cfg = tr.TrainConfig(learning_rate=3e-3, num_epochs=6, batch_size=8,
                     eval_every_batches=4, environment="mtl", seeds=(1,))

params = md.init_model(enc, md.MTL, seed=1)
params, record = tr.train_one(params, train_ds, val_ds, cfg, seed=1)

print("\nvalidation-loss curve (step, loss):")
for step, loss, f1s in record.eval_history:
    f1_text = " ".join(f"{t}={f1:.2f}" for t, f1 in f1s.items())
    print(f"  step {step:3d}  loss {loss:.4f}  F1 {f1_text}")
print(f"best checkpoint at step {record.best_checkpoint_step}"
      f"{' (early stop)' if record.stopped_early else ''}")

print("\nfinal scores (macro F1):")
for split_name, ds in (("train", train_ds), ("val", val_ds)):
    preds = tr.predict_dataset(params, ds)
    scores = {t: mx.score(preds[t], ds.labels[t]).f1 for t in dt.TASKS}
    print(f"  {split_name}: " + "  ".join(f"{t}={v:.3f}" for t, v in scores.items()))
