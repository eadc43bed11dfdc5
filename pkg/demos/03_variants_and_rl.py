# Small-scale comparison of the fusion variants, then self-critical fine-tuning.
# Takes several minutes on one CPU.
from rfnet.corpus import generate_dataset
from rfnet.experiments import run_ablation, split_cider
from rfnet.model import ABLATIONS, FusionConfig, RFNet
from rfnet.numerics import Rng
from rfnet.trainer import TrainConfig, finetune_rl, train_xe

ds = generate_dataset(800, seed=0, min_count=1)
base = FusionConfig(view_dims=ds.view_dims, vocab_size=len(ds.vocab), n_frequent=ds.n_frequent, s=32, T1=1, T2=1)
tcfg = TrainConfig(max_epochs=10, lr_xe=2e-3)

res = run_ablation(ds, base, tcfg, seeds=(0, 1), ablations=ABLATIONS, beam_k=1, split="test", workers=1)
print(res.table())  # ten short epochs favour the smaller variants; the full-size run is in tests/test_acceptance.py

ck, _ = train_xe(RFNet.create(base, Rng(0)), ds, tcfg)
print("after cross-entropy:  test CIDEr-D x100 =", round(split_cider(ck.model, ds), 2))
rl, rlog = finetune_rl(ck, ds, TrainConfig(rl_max_epochs=3), max_updates=150)
for r in rlog.records:
    print(f"rl epoch {r.epoch}  steps {r.steps}  val {r.val_cider:.3f}")
print("after self-critical:  test CIDEr-D x100 =", round(split_cider(rl.model, ds), 2))
