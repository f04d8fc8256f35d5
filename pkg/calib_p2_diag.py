import sys
import time

import numpy as np

from xlingcap import numerics as nm
from xlingcap.config import Phase2Config, WorldConfig
from xlingcap.metrics import cider
from xlingcap.model import collect_node_features
from xlingcap.numerics import AdamState, Tensor, adam_step
from xlingcap.synthworld import (generate_image_graphs, generate_parallel_corpus,
                                 generate_world, materialize_distortion)
from xlingcap.training import (CrossModalParams, cycle_loss, gan_losses,
                               image_features, infer_caption, load_phase1_model)

SEED = 1
IDENT = len(sys.argv) > 1 and sys.argv[1] == "ident"
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 60
LR = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3

world = generate_world(WorldConfig(seed=SEED, homonym_scene_rate=0.6))
train = generate_parallel_corpus(world, 2000, salt=1)
bank = generate_image_graphs(world, 1000, salt=1)
bank_test = generate_image_graphs(world, 150, salt=5)
model, _ = load_phase1_model(f"/tmp/calib_p1_seed{SEED}")
model.freeze()
d = model.cfg.d_emb

feats_y = collect_node_features(model, [it.graph for it in train.items])
feats_i = image_features(model, world, bank.graphs)
feats_i_clean = collect_node_features(model, bank.graphs)
a_mat, b_vec = materialize_distortion(world.config.distortion, d, world.seed)

print("feature scale: y std", {k: round(float(feats_y.get(k).std()), 3)
                               for k in "ora"},
      "i std", {k: round(float(feats_i.get(k).std()), 3) for k in "ora"},
      flush=True)


def make_identity(mlp, d):
    h = mlp.layers[0].w.shape[1]
    assert h >= 2 * d
    for layer in mlp.layers:
        layer.w.data[:] = 0.0
        layer.b.data[:] = 0.0
    mlp.layers[0].w.data[:d, :d] = np.eye(d)
    mlp.layers[0].w.data[:d, d:2 * d] = -np.eye(d)
    mlp.layers[1].w.data[:2 * d, :2 * d] = np.eye(2 * d)
    mlp.layers[2].w.data[:d, :d] = np.eye(d)
    mlp.layers[2].w.data[d:2 * d, :d] = -np.eye(d)


rng = np.random.default_rng([SEED, 6000])
cmm = CrossModalParams(rng, d, 2 * d, 64)
if IDENT:
    for kind in "ora":
        make_identity(cmm.mappers[f"{kind}_i2y"], d)
        make_identity(cmm.mappers[f"{kind}_y2i"], d)

gen_params = cmm.mapper_tensors()
disc_params = cmm.disc_tensors()
opt_g = AdamState(gen_params, lr=LR)
opt_d = AdamState(disc_params, lr=LR)

batch = 64
t0 = time.time()
for epoch in range(EPOCHS):
    stats = {}
    for kind in "ora":
        zi_all, zy_all = feats_i.get(kind), feats_y.get(kind)
        n_steps = max(1, min(len(zi_all), len(zy_all)) // batch)
        cyc_v = dv_v = gen_v = 0.0
        for _ in range(n_steps):
            zi = Tensor(zi_all[rng.integers(0, len(zi_all), batch)])
            zy = Tensor(zy_all[rng.integers(0, len(zy_all), batch)])
            cmm.zero_grad(); nm.reset_tape()
            _, dva = gan_losses(zi, zy, "i2y", cmm, kind, detach_fake=True)
            _, dvb = gan_losses(zi, zy, "y2i", cmm, kind, detach_fake=True)
            nm.backward(-(dva + dvb))
            adam_step(disc_params, {k: t.grad for k, t in disc_params.items()},
                      opt_d)
            cmm.zero_grad(); nm.reset_tape()
            ga, _ = gan_losses(zi, zy, "i2y", cmm, kind)
            gb, _ = gan_losses(zi, zy, "y2i", cmm, kind)
            cyc = cycle_loss(zi, zy, cmm, kind)
            nm.backward(ga + gb + cyc * 10.0)
            adam_step(gen_params, {k: t.grad for k, t in gen_params.items()},
                      opt_g)
            cyc_v += cyc.item(); dv_v += (dva.item() + dvb.item()) / 2
            gen_v += (ga.item() + gb.item()) / 2
        stats[kind] = (cyc_v / n_steps / (2 * d), dv_v / n_steps,
                       gen_v / n_steps)
    if (epoch + 1) % max(1, EPOCHS // 10) == 0:
        with nm.no_grad():
            mapped = cmm.map_i2y("o", Tensor(feats_i.o)).data
        rel = np.linalg.norm(mapped - feats_i_clean.o) / max(
            1e-9, np.linalg.norm(feats_i_clean.o))
        print(f"ep{epoch+1}: " + " ".join(
            f"{k}: cyc/dim={s[0]:.4f} D={s[1]:.2f} G={s[2]:.2f}"
            for k, s in stats.items()) + f" | relL2(o)={rel:.3f} "
            f"t={time.time()-t0:.0f}s", flush=True)

cands = [infer_caption(model, g, cmm, (a_mat, b_vec), beam=3)
         for g in bank_test.graphs]
no = [infer_caption(model, g, None, (a_mat, b_vec), beam=3, use_cmm=False)
      for g in bank_test.graphs]
c1, c0 = cider(cands, bank_test.references), cider(no, bank_test.references)
print(f"CIDEr cmm={c1:.3f} vs no={c0:.3f} gain={100*(c1-c0)/max(1e-9,c0):.1f}%",
      flush=True)
