"""A two-minute tour on the bundled digits.

Half the digit classes (split B) serve as the source task. A small CNN is
trained on them twice, once naturally and once with PGD adversarial
training. Each extractor is then frozen and a fresh linear head is fit on
clean images of the other half (split A). The head on the robust extractor
keeps much of the source's robustness. The natural one has none to give.

    python demos/quickstart.py
"""
from robuxfer import transfer as T
from robuxfer.attacks import AttackConfig
from robuxfer.datasets import SubsetSpec, load_digits, split_classes, train_val_split
from robuxfer.models import build_cnn_lite
from robuxfer.training import TrainConfig, train_adversarial, train_natural

EPS = 0.3
N_VAL = 200  # attacked validation images per evaluation, to keep the tour short

train, val = train_val_split(load_digits(), 0.2, seed=0)
tgt_train, src_train, split = split_classes(train, SubsetSpec(0.5, seed=0))
tgt_val, src_val = split.apply(val)
tgt_val, src_val = tgt_val.take(range(N_VAL)), src_val.take(range(N_VAL))
print(f"source classes {split.b_classes}, target classes {split.a_classes}")

recipe = dict(iterations=400, batch_size=32, lr_schedule=[(0, 0.05), (300, 0.005)], weight_decay=5e-4)
natural = build_cnn_lite(width=4, num_classes=5, seed=0)
train_natural(natural, src_train, TrainConfig(**recipe))

robust = build_cnn_lite(width=4, num_classes=5, seed=0)
train_adversarial(robust, src_train, TrainConfig(**recipe, eps_warmup=150,
                                                 attack=AttackConfig(eps=EPS, step_size=0.1, steps=3)))

attack = {"pgd": AttackConfig(eps=EPS, steps=20)}
for name, model in (("natural", natural), ("robust", robust)):
    m = T.evaluate(model, src_val, attack)
    print(f"{name:8s} source task: clean {m['clean_acc']:.2f}  PGD-20 {m['pgd_acc']:.2f}")

head_cfg = TrainConfig(iterations=1000, batch_size=64, lr_schedule=[(0, 0.05), (750, 0.005)])
for name, model in (("natural", natural), ("robust", robust)):
    r = T.retrain_head(model, tgt_train, T.HeadSpec(), head_cfg, tgt_val, attack)
    print(f"{name:8s} frozen extractor, new head on target: clean {r.metrics['clean_acc']:.2f}"
          f"  PGD-20 {r.metrics['pgd_acc']:.2f}")
