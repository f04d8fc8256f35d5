"""Homonym accuracy split by context pattern (direct neighbor vs cross clause)."""
import sys
import time

from xlingcap.config import ModelConfig, Phase1Config, WorldConfig
from xlingcap.metrics import bleu
from xlingcap.synthworld import generate_parallel_corpus, generate_world
from xlingcap.training import train_phase1

SEED = int(sys.argv[1])
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 48
VARIANTS = sys.argv[3].split(",") if len(sys.argv) > 3 else ["word", "word_sub", "gated"]

world = generate_world(WorldConfig(seed=SEED, homonym_scene_rate=0.6))
train = generate_parallel_corpus(world, 2000, salt=1)
val = generate_parallel_corpus(world, 200, salt=2)


def hom_cases(item):
    """(token, truth, pattern) per homonym occurrence in the item's graph."""
    out = []
    for node in item.graph.objects:
        ctx = world.rules.contexts.get(node.token)
        if not ctx:
            continue
        truth = world.rules.translate_object(node.token, item.graph, node.id)
        neighbors = {item.graph.objects[j].token
                     for j in item.graph.neighbors(node.id)}
        if any(u in ctx for u in neighbors):
            pattern = "direct"
        elif any(n.token in ctx for n in item.graph.objects):
            pattern = "cross"
        else:
            pattern = "default"
        out.append((node.token, truth, pattern))
    return out


def evaluate(model):
    stats = {p: [0, 0] for p in ("direct", "cross", "default")}
    sense2 = {p: [0, 0] for p in ("direct", "cross", "default")}
    cands = []
    for it in val.items:
        cand = model.caption(it.graph, beam=1)
        cands.append(cand)
        for token, truth, pattern in hom_cases(it):
            stats[pattern][1] += 1
            if truth in cand:
                stats[pattern][0] += 1
            if truth != world.rules.word[token]:
                sense2[pattern][1] += 1
                if truth in cand:
                    sense2[pattern][0] += 1
    b1 = 100 * bleu(cands, [[it.target] for it in val.items], 1)
    return b1, stats, sense2


for variant in VARIANTS:
    t0 = time.time()
    mc = ModelConfig(d_emb=48, d_att=32, d_word=32, lstm_hidden=48,
                     gate_hidden=32, variant=variant)
    cfg = Phase1Config(d_c=100, epochs_xe=EPOCHS - 8, epochs_joint=8,
                       lr=5e-3, batch=100, use_kl=True)
    res = train_phase1(world, train, mc, cfg, seed=SEED)
    b1, stats, sense2 = evaluate(res.model)
    fmt = lambda d: {k: f"{v[0]}/{v[1]}" for k, v in d.items() if v[1]}
    print(f"seed{SEED} {variant} ep{EPOCHS}: bleu1={b1:.2f} "
          f"all={fmt(stats)} secondary-sense={fmt(sense2)} "
          f"t={time.time()-t0:.0f}s", flush=True)
