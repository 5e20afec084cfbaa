# %% [markdown]
# # Where does a translation come from?
#
# Train a small model on the noisy toy task, then ask, token by token, how
# much each input position contributed to the output. Hallucinated outputs
# tend to spread their credit thinly over the source.

# %%
import numpy as np

from _small import small_config
from atrg import pipeline as pl
from atrg.attribution import extract_features, integrated_gradients, one_step_attribution

cfg = small_config()
corpus = pl.generate(cfg)
print(len(corpus.train), "training pairs; e.g.")
for p in corpus.train[:3]:
    print("  ", " ".join(p.source), "->", " ".join(p.target))

# %%
base = pl.train_baseline(cfg, corpus)
model = base.model.eval()
print(f"best epoch {base.best_epoch}, final lr {base.final_lr:.2e}")

# %% [markdown]
# ## Integrated gradients and the one-step shortcut
#
# Scores are taken on token embeddings against an all-PAD baseline. With
# enough integration steps the scores add up to the change in log-prob of
# each emitted token.

# %%
src = corpus.valid[0].source
pair = pl.SentencePair(src, model.translate([src])[0])
ig = integrated_gradients(model, pair, steps=256)
gap = ig.source.sum(1) + ig.target.sum(1) - (ig.f_input - ig.f_baseline)
print("decode:", " ".join(pair.target))
print("completeness gap per step:", np.abs(gap).max())

one = one_step_attribution(model, pair)
keep = ig.source_mask
r = np.corrcoef(one.source[:, keep].ravel(), ig.source[:, keep].ravel())[0, 1]
print(f"one-step vs IG source scores, Pearson r = {r:.3f}")

# %%
np.set_printoptions(precision=2, suppress=True, linewidth=120)
print("source attributions (rows = output steps):")
print(np.abs(ig.source[:, keep]))

# %% [markdown]
# ## Hallucinated versus correct outputs
#
# Label validation decodes by sentence BLEU against the reference and
# compare the four sentence features.

# %%
sentences = pl.attribute_outputs(model, corpus.valid, cfg.threshold)
summary = pl.feature_summary(sentences)
print(f"{summary['n_hallucinated']} hallucinated / {summary['n_correct']} correct")
for name in summary["p_value"]:
    h, c, p = summary["hallucinated"][name], summary["correct"][name], summary["p_value"][name]
    if h is None or c is None:
        continue
    print(f"  {name:24s} {h:7.3f} vs {c:7.3f}   p={p:.2g}")

# %%
worst = max(sentences, key=lambda s: extract_features(s.matrix).source_entropy)
print("most diffuse output:", " ".join(worst.hypothesis))
print("reference:          ", " ".join(worst.pair.target))
