"""Probe ordering fixes: longer training / gate bias on a given seed."""
import sys
import time

from xlingcap.config import ModelConfig, Phase1Config, WorldConfig
from xlingcap.metrics import bleu
from xlingcap.synthworld import generate_parallel_corpus, generate_world
from xlingcap.training import train_phase1

SEED = int(sys.argv[1])
EPOCHS = int(sys.argv[2])
GATE_BIAS = float(sys.argv[3]) if len(sys.argv) > 3 else 2.0
VARIANTS = sys.argv[4].split(",") if len(sys.argv) > 4 else ["word_sub", "gated"]

world = generate_world(WorldConfig(seed=SEED, homonym_scene_rate=0.6))
train = generate_parallel_corpus(world, 2000, salt=1)
val = generate_parallel_corpus(world, 200, salt=2)

for variant in VARIANTS:
    t0 = time.time()
    mc = ModelConfig(d_emb=48, d_att=32, d_word=32, lstm_hidden=48,
                     gate_hidden=32, variant=variant, gate_bias=GATE_BIAS)
    cfg = Phase1Config(d_c=16, epochs_xe=EPOCHS - 8, epochs_joint=8,
                       lr=5e-3, batch=100, use_kl=True)
    res = train_phase1(world, train, mc, cfg, seed=SEED)
    cands = [res.model.caption(it.graph, beam=1) for it in val.items]
    b1 = 100 * bleu(cands, [[it.target] for it in val.items], 1)
    print(f"seed{SEED} {variant} ep{EPOCHS} gate_bias={GATE_BIAS}: "
          f"bleu1={b1:.2f} xe={res.final_xe_per_token:.3f} "
          f"t={time.time()-t0:.0f}s", flush=True)
