"""Train a small model on synthetic scenes, then sample and select.

Uses 32x32 scenes so it finishes in seconds. The acceptance suite
runs the same recipe at 128x128.
"""
import time

from panflow.data import bicubic_upsample, synth_triples
from panflow.experiments import evaluate, predict, sample_and_select
from panflow.flow import ModelConfig, PanFlowModel
from panflow.metrics import psnr
from panflow.train import TrainConfig, evaluate_bpd, train

train_set = synth_triples(16, size=32, seed=0)
test_set = synth_triples(4, size=32, seed=1)

model = PanFlowModel(ModelConfig(bands=4, hidden_channels=8), seed=0)
cfg = TrainConfig(lr0=3e-3, batch_size=1, pretrain_epochs=40, nll_epochs=10)
print("bits/dim before training: %.3f" % evaluate_bpd(model, train_set))

t0 = time.time()
train(model, train_set, cfg, on_epoch=lambda r: r.epoch % 10 == 9 and print(
    "epoch %3d  l1 %.4f  bpd %.3f" % (r.epoch, r.mean_l1, r.mean_nll_bits_per_dim)))
print("trained in %.0fs, bits/dim after: %.3f" % (time.time() - t0, evaluate_bpd(model, train_set)))

flow = evaluate(predict(model, test_set), test_set).aggregate()
cubic = evaluate([bicubic_upsample(t.L, 4) for t in test_set], test_set).aggregate()
for k in flow:
    print("%-6s flow %8.4f   bicubic %8.4f" % (k, flow[k], cubic[k]))

t = test_set[0]
idx, cands, logps, seeds = sample_and_select(model, t.L, t.P, num=6, tau=0.8, seed=0)
for i, (c, lp) in enumerate(zip(cands, logps)):
    mark = "  <- selected" if i == idx else ""
    print("candidate %d  log p %12.2f  PSNR %.3f%s" % (i, lp, psnr(c, t.H), mark))
