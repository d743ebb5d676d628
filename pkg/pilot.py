"""Throwaway pilot: verify skill learnability and composed-task orderings."""
import time

import numpy as np

from loralab import tasks
from loralab.adapters import ALL_SITES
from loralab.fusion import Granularity, StaticWeights
from loralab.model import ModelConfig, init_model, generate
from loralab.training import (
    FewShotSet,
    TrainConfig,
    train_gate,
    train_lora,
    train_static_weights,
    train_fewshot_baselines,
    _optimize,
)

t_start = time.time()


def stamp(msg):
    print(f"[{time.time() - t_start:6.1f}s] {msg}", flush=True)


cfg = ModelConfig(vocab_size=tasks.vocab_size())
rng = np.random.default_rng(0)
model = init_model(cfg, rng)

# backbone pretrain on echo corpus
echo = tasks.gen_echo_corpus(2000, seed=10)
model.set_trainable(True)
bb_cfg = TrainConfig(peak_lr=3e-3, epochs=8, batch_size=8, seed=10)
last = _optimize(model, echo, model.parameters(), bb_cfg)
model.set_trainable(False)
stamp(f"backbone pretrained, last loss {last:.4f}")
echo_hold = tasks.gen_echo_corpus(100, seed=11)
acc = tasks.token_accuracy(model, None, None, echo_hold)
stamp(f"backbone echo held-out token acc: {acc:.3f}")

# skill adapters
def fit(skill, seed, n=700):
    corpus = tasks.gen_corpus(skill, n, seed)
    hold = tasks.gen_corpus(skill, 100, seed + 1)
    t_cfg = TrainConfig(peak_lr=2e-3, epochs=3, batch_size=8, seed=seed)
    ad = train_lora(model, corpus, ALL_SITES, 8, 16.0, t_cfg, name=skill.value)
    acc = tasks.token_accuracy(model, [ad], None, hold)
    em = tasks.evaluate(model, [ad], None, hold[:50]).exact_match
    stamp(f"{skill.value}: held-out token acc {acc:.3f}, EM {em:.3f}")
    return ad

lang = fit(tasks.Skill.LANG, 101)
math_ = fit(tasks.Skill.MATH, 102)

# does the lang adapter reverse digit strings? (content transfer)
probe = [tasks.Example(f"m:40|{s}=", s[::-1] + "=", "lang", 0) for s in ("514", "2+7", "903", "8+1")]
em = tasks.evaluate(model, [lang], None, probe).exact_match
for r in tasks.evaluate(model, [lang], None, probe).results:
    print("   lang on digits:", repr(r.prompt), "->", repr(r.generated), "gold", repr(r.gold))
stamp(f"lang digit-reversal EM {em:.2f}")

# composed task
splits = tasks.gen_composed(tasks.Skill.LANG, tasks.Skill.MATH, 200, 50, 50, seed=1)
fewshot = FewShotSet(tuple(splits.train))

em_lang = tasks.evaluate(model, [lang], None, splits.test).exact_match
em_task = tasks.evaluate(model, [math_], None, splits.test).exact_match
em_avg = tasks.evaluate(model, [lang, math_], StaticWeights("average"), splits.test).exact_match
stamp(f"single-lang {em_lang:.3f} single-task {em_task:.3f} average {em_avg:.3f}")

g_cfg = TrainConfig(peak_lr=1e-2, epochs=5, batch_size=4, seed=1)
hub = train_static_weights(model, [lang, math_], fewshot, g_cfg)
em_hub = tasks.evaluate(model, [lang, math_], hub, splits.test).exact_match
stamp(f"static merged w={hub.weights} EM {em_hub:.3f}")

gate = train_gate(model, [lang, math_], fewshot, Granularity.LAYER, g_cfg)
em_flow = tasks.evaluate(model, [lang, math_], gate, splits.test).exact_match
stamp(f"gate(layer) EM {em_flow:.3f}")

for r in tasks.evaluate(model, [lang, math_], gate, splits.test).results[:8]:
    print("   flow:", repr(r.prompt), "->", repr(r.generated), "gold", repr(r.gold), r.correct)

new_lora = train_fewshot_baselines(model, fewshot, TrainConfig(peak_lr=2e-3, epochs=5, batch_size=4, seed=1), "new-lora")
em_new = tasks.evaluate(model, [new_lora], None, splits.test).exact_match
stamp(f"ft-new-lora EM {em_new:.3f}")
