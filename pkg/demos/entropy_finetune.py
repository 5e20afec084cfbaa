# %% [markdown]
# # Fine-tuning against diffuse attributions
#
# Add a penalty on source-attribution entropy to the usual cross-entropy
# and fine-tune briefly. A plain cross-entropy fine-tune over the same
# steps is the control. Then fit a token-level detector on attribution
# features.

# %%
from _small import small_config
from atrg import pipeline as pl
from atrg.lab import hallucination_rate

cfg = small_config()
corpus = pl.generate(cfg)
base = pl.train_baseline(cfg, corpus)
print("base hallucination rate:", hallucination_rate(base.model.eval(), corpus.test, cfg.threshold))

# %%
tuned = {}
for mode in ("ce", "ce+attr"):
    r = pl.finetune(cfg, base.model, base.final_lr, corpus, mode)
    tuned[mode] = r.model.eval()
    last = r.log[-1]
    print(f"{mode:8s} lr {last.lr:.2e}  source entropy {last.attr:.3f}  "
          f"test rate {hallucination_rate(tuned[mode], corpus.test, cfg.threshold):.3f}")

# %%
ev_base = pl.evaluate(base.model, corpus.test)
for mode, m in tuned.items():
    b = pl.bleu_summary(ev_base, pl.evaluate(m, corpus.test), corpus.test, cfg)
    print(mode, {k: None if v is None else round(v, 2) for k, v in b.items()})

# %% [markdown]
# ## A token-level detector
#
# Every token of a hallucinated sentence counts as positive. The
# detector sees entropy and attribution-change features up to that token.

# %%
test_attr = pl.attribute_outputs(base.model, corpus.test, cfg.threshold, cfg.attribution_limit)
valid_attr = pl.attribute_outputs(base.model, corpus.valid, cfg.threshold, cfg.attribution_limit)
run = pl.train_classifier(cfg, test_attr, valid_attr)
for k, v in run.summary().items():
    print(f"  {k:18s} {v:.3f}")

# %%
for line in pl.annotated_lines(run.model, [s for s in valid_attr if s.hallucinated][:5]):
    print(line)

# %% [markdown]
# On a model this small one epoch of the entropy penalty can cost clean
# BLEU. The default configuration (`atrg run`) is the calibrated setting.
