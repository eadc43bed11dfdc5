# Memorise ten captions, then decode them with greedy and beam search.
from dataclasses import replace

from rfnet.corpus import generate_dataset
from rfnet.inference import beam_search, greedy_decode
from rfnet.model import FusionConfig, RFNet
from rfnet.numerics import Rng
from rfnet.trainer import TrainConfig, _batch_enc, train_xe

base = generate_dataset(200, seed=5, min_count=1)
tiny = [replace(ex, captions=ex.captions[:1]) for ex in base.splits["train"][:10]]
ds = replace(base, splits={**base.splits, "train": tiny})

cfg = FusionConfig(view_dims=ds.view_dims, vocab_size=len(ds.vocab), n_frequent=ds.n_frequent, s=32, dropout_p=0.0)
model = RFNet.create(cfg, Rng(0))
print(model.census(), model.n_parameters(), "parameters")

tcfg = TrainConfig(lr_xe=3e-3, lr_decay=1.0, lam=0.0, lsr_eps=0.0, scheduled_sampling=False,
                   max_epochs=500, patience=10**6)
ck, tlog = train_xe(model, ds, tcfg, evaluate=False)
for r in tlog.records[::100]:
    print(f"epoch {r.epoch:3d}  loss {r.train_loss:.4f}")

enc = _batch_enc(ck.model, tiny)
greedy = greedy_decode(ck.model, enc, max_len=20)
for i, ex in enumerate(tiny[:5]):
    best, kbest = beam_search(ck.model, _batch_enc(ck.model, [ex]), beam_k=3, max_len=20)
    print("\nref   :", " ".join(ds.vocab.decode(ex.captions[0])))
    print("greedy:", " ".join(ds.vocab.decode(greedy[i])))
    print("beam 3:", " ".join(ds.vocab.decode(best)), f"(log p {kbest[0][1]:.3f})")
