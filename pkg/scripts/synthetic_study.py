"""Train on synthetic cohorts and check encrypted inference on the held-out split.

For each signal strength: build the feature matrix, select by chi-squared,
tune lambda by cross-validation, train, then push the test patients through
the encrypted client/server path and compare labels with the plaintext model.
"""
import argparse
import json

import numpy as np

from heinfer import genomics as G
from heinfer.fixed_point import PlainModuliPair, ScalingConfig
from heinfer.protocol import (PRESETS, ClientKeys, InferenceClient, InferenceServer, LocalConnection,
                              ModelFile, preset_params)
from heinfer.ring import default_rng


def encrypted_labels(result, X, preset, seed):
    keys = ClientKeys.generate(preset_params(preset), default_rng(seed))
    m = result.model
    model = ModelFile(m.feature_names, m.W, m.b, ScalingConfig(), PlainModuliPair(*keys.twin.moduli),
                      keys.twin.n)
    client = InferenceClient(keys, LocalConnection(InferenceServer(model)))
    return client.infer(X, batch_rows=64).labels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--signals", default="0,0.25,0.5,1.0")
    ap.add_argument("--classes", type=int, default=11)
    ap.add_argument("--patients", type=int, default=2000)
    ap.add_argument("--genes", type=int, default=400)
    ap.add_argument("--features", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--params-preset", choices=PRESETS, default="test32")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    rows = []
    for signal in (float(s) for s in args.signals.split(",")):
        cfg = G.CohortConfig(n_classes=args.classes, n_genes=args.genes, n_patients=args.patients,
                             signal=signal, seed=args.seed)
        res = G.run_pipeline(*G.generate_synthetic_cohort(cfg), n_features=args.features,
                             epochs=args.epochs, seed=args.seed)
        X = res.features.select([res.features.feature_names.index(n) for n in res.selected]).values
        X_te, y_te = X[res.test_idx], res.features.labels[res.test_idx]
        plain = G.predict(X_te, res.model)
        enc = encrypted_labels(res, X_te, args.params_preset, args.seed)
        row = {"signal": signal, "lambda": res.metrics["lambda"], "accuracy": res.metrics["accuracy"],
               "micro_auc": res.metrics["micro_auc"],
               "encrypted_accuracy": float(np.mean(enc == y_te)),
               "label_agreement": float(np.mean(enc == plain))}
        rows.append(row)
        print(json.dumps(row))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
