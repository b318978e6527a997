"""WordPiece vocabulary training, encoding, and masked-LM corruption."""

from collections import Counter

from germeval_mtl import tokenizer as tok

corpus = [
    "du hast das Thema im Kern nicht verstanden",
    "das Thema ist wichtig und bleibt wichtig",
    "wer hat das gesagt und warum",
    "im Kern hast du recht",
    "warum ist das Thema so wichtig",
]

print("== training a vocabulary on five comments ==")
vocab = tok.build_vocab(corpus, max_size=120)
print(f"vocab size: {len(vocab)} (specials occupy ids 0-4: {tok.SPECIAL_TOKENS})")

text = "@USER, du hast das Thema im Kern nicht verstanden"
print(f"\n== encoding: {text!r} ==")
print("pieces:", vocab.tokenize(text))
encoded = tok.encode(vocab, text, max_len=20)
print("ids:   ", encoded.ids)
print("mask:  ", encoded.attention_mask)
print("decode:", tok.decode(vocab, encoded.ids))

print("\n== masked-LM corruption (15% selection, 80/10/10) ==")
masked, labels = tok.mask_for_mlm(vocab, encoded, rng_seed=7, mask_prob=0.4)
for pos, (before, after, label) in enumerate(zip(encoded.ids, masked.ids, labels)):
    if label != tok.IGNORE_INDEX:
        action = "-> [MASK]" if after == tok.MASK_ID else (
            "kept" if after == before else f"-> random id {after}")
        print(f"position {pos:2d}: {vocab.id_to_token[before]!r} {action}")

print("\n== selection rate over many seeds ==")
outcomes = Counter()
maskable = sum(1 for i in encoded.ids if i >= len(tok.SPECIAL_TOKENS))
for seed in range(2000):
    _, labels = tok.mask_for_mlm(vocab, encoded, rng_seed=seed, mask_prob=0.15)
    outcomes["selected"] += sum(1 for v in labels if v != tok.IGNORE_INDEX)
    outcomes["maskable"] += maskable
print(f"empirical selection rate: {outcomes['selected'] / outcomes['maskable']:.4f} (target 0.15)")
