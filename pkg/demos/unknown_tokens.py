# %% [markdown]
# # Unknown words as hallucination triggers
#
# Insert a single unknown token into sentences the model translates
# perfectly and watch BLEU against the unperturbed decode. Inserting the
# most frequent training token instead is the control.

# %%
from _small import small_config
from atrg import pipeline as pl
from atrg.corpus import build_vocabularies
from atrg.lab import oov_score_stats, select_by_score, sentence_scores

cfg = small_config()
corpus = pl.generate(cfg)
model = pl.train_baseline(cfg, corpus).model.eval()

# %%
curves = pl.perturbation_curves(cfg, model, corpus)
print("position  " + "  ".join(f"{c.kind:>9s}" for c in curves))
for k, pos in enumerate(curves[0].positions):
    print(f"{pos:8d}  " + "  ".join(f"{c.mean_bleu[k]:9.1f}" for c in curves))
print("trend of the unk curve over positions:", round(pl.curves_summary(curves)["unk"]["spearman"], 3))

# %% [markdown]
# ## Scores and out-of-vocabulary words
#
# Score each test decode with sentence BLEU, then split sentences into
# low (< 25) and high (> 85) buckets. Sentences containing source words
# outside the training vocabulary should pile up in the low bucket.

# %%
hyps = pl.parallel_translate(model, [p.source for p in corpus.test])
scores = sentence_scores(hyps, [p.target for p in corpus.test])
scored = [pl.SentencePair(p.source, p.target, split="test", score=float(s)) for p, s in zip(corpus.test, scores)]
low, high = select_by_score(scored)
print(f"{len(low)} low-scoring, {len(high)} high-scoring of {len(scored)}")

src_vocab, _ = build_vocabularies(corpus.train)
st = oov_score_stats(scored, src_vocab)
for label, g in (("with OOV", st.with_oov), ("without OOV", st.without_oov)):
    print(f"{label:12s} n={g.count:4d}  mean BLEU {g.mean:5.1f}  histogram {g.histogram}")
