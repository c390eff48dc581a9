"""How much location-invariance transfers to new classes after fully-translated pretraining.

Pretrains vgg-mini on an 18-class glyph bank and, every ``--every`` epochs,
fine-tunes a copy at one location on a disjoint 10-class bank, both with all
layers trainable and with only the classifier trainable. Prints grid-mean
normalized accuracy and the max-displacement penultimate cosine of the
pretrained net on the new items.

    python3 scripts/transfer_sweep.py --exemplars 1 --epochs 50 --every 10
"""
import argparse
import time

from transinv import data as D
from transinv import model as M
from transinv import protocol as P
from transinv import tensor as T
from transinv.optim import Adam


def head_only_fine_tune(model, bank, cfg, seed, samples_per_epoch, stop):
    model = P.reinit_head(model, bank.num_classes, seed)
    stream = D.BatchStream(bank, D.FixedLocation(), cfg, 32, seed, samples_per_epoch)
    opt = Adam()
    head = {k: model.params[k] for k in ("weight14", "bias14") if k in model.params}
    for _ in range(stop.max_epochs):
        correct = seen = 0
        for x, y, _ in stream.epoch():
            model.zero_grad()
            logits = M.forward(model, x)
            loss = T.softmax_cross_entropy(logits, y)
            T.backward(loss)
            opt.step(head)
            correct += int((logits.data.argmax(1) == y).sum())
            seen += len(y)
        if correct / seen >= stop.target_accuracy:
            break
    return model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--exemplars", type=int, default=1)
    ap.add_argument("--affine", type=float, default=0.0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--every", type=int, default=10)
    ap.add_argument("--samples-per-epoch", type=int, default=640)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = D.DESK
    pre = D.synth_glyph_bank(18, args.exemplars, 32, seed=100, affine=args.affine)
    new = D.synth_glyph_bank(10, 1, 32, seed=200)
    model = M.build(M.preset("vgg-mini", 18), args.seed)
    stream = D.BatchStream(pre, D.FullyTranslated(), cfg, 32, args.seed, args.samples_per_epoch)
    opt, t0 = Adam(), time.time()
    stop = P.StopCriterion(50, 0.99)
    print("epoch  train_acc  cos_new  norm_full  norm_head  seconds")
    for epoch in range(1, args.epochs + 1):
        model, hist = P.train_to_criterion(model, stream, opt, P.StopCriterion(1, 1.1))
        if epoch % args.every:
            continue
        cos = P.cosine_profile(model, new, cfg).mean[-1]
        full, _ = P.fine_tune(model, new, cfg, stop=stop, seed=args.seed, samples_per_epoch=320)
        head = head_only_fine_tune(model, new, cfg, args.seed, 320, stop)
        nf = P.normalized_accuracy(P.evaluate_grid(full, new, cfg).mean, 10)
        nh = P.normalized_accuracy(P.evaluate_grid(head, new, cfg).mean, 10)
        print(f"{epoch:5d}  {hist.accuracy[-1]:9.3f}  {cos:7.3f}  {nf:9.1f}  {nh:9.1f}  {time.time() - t0:7.0f}",
              flush=True)


if __name__ == "__main__":
    main()
