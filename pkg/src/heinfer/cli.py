"""Command-line entry point: ``python -m heinfer <command> ...``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, genomics
from .fixed_point import PlainModuliPair, ScalingConfig
from .protocol import (PRESETS, ClientKeys, Connection, InferenceClient,
                       InferResponse, ModelFile, client_finalize, client_prepare, preset_params, serve)

log = logging.getLogger("heinfer")


def _threads(args) -> int:
    if args.threads:
        return args.threads
    try:
        return max(1, int(os.environ.get("HEINFER_THREADS", "1")))
    except ValueError:
        return 1


def _load_features(path, samples: int | None = None, names=None) -> np.ndarray:
    """Rows from an FMTX file or a CSV (header row, one sample per line).

    With ``names`` the columns are reordered to match the model.
    """
    path = Path(path)
    if path.read_bytes()[:4] == b"FMTX":
        fm = genomics.FeatureMatrix.load(path)
        cols, X = fm.feature_names, fm.values
    else:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        skip = [i for i, h in enumerate(header) if h in ("sample_id", "label")]
        keep = [i for i in range(len(header)) if i not in skip]
        cols = [header[i] for i in keep]
        X = np.array([[float(r[i]) for i in keep] for r in body]).reshape(len(body), len(keep))
    if names is not None and list(cols) != list(names):
        index = {c: i for i, c in enumerate(cols)}
        missing = [n for n in names if n not in index]
        if missing:
            raise SystemExit(f"feature file lacks {len(missing)} model features, e.g. {missing[0]}")
        X = X[:, [index[n] for n in names]]
    return X[:samples] if samples else X


def _moduli(preset: str):
    params = preset_params(preset)
    return PlainModuliPair(params[0].t, params[1].t), params[0].n


# --------------------------------------------------------------------------
# commands


def cmd_keygen(args):
    keys = ClientKeys.generate(preset_params(args.params_preset))
    paths = keys.save(args.keys_dir)
    for role, p in paths.items():
        print(f"{role}\t{p}\t{p.stat().st_size} bytes")


def cmd_synth(args):
    cfg = genomics.CohortConfig(n_classes=args.classes, n_genes=args.genes, n_patients=args.patients,
                                signal=args.signal, seed=args.seed)
    snvs, cnvs, labels = genomics.generate_synthetic_cohort(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    genomics.write_snv_tsv(out / "snv.tsv", snvs)
    genomics.write_cnv_tsv(out / "cnv.tsv", cnvs)
    genomics.write_labels_tsv(out / "labels.tsv", labels)
    print(f"{len(labels)} patients, {len(snvs)} SNVs, {len(cnvs)} CNVs -> {out}")


def cmd_encode_features(args):
    snvs = genomics.read_snv_tsv(args.snv)
    cnvs = genomics.read_cnv_tsv(args.cnv)
    labels = genomics.read_labels_tsv(args.labels)
    genes = genomics.rank_genes_by_snv_frequency(snvs, labels, args.top_genes)
    fm = genomics.build_feature_matrix(snvs, cnvs, labels, genes, mode=args.mode)
    fm.save(args.out)
    if args.csv:
        fm.to_csv(args.csv)
    print(f"{fm.shape[0]} samples x {fm.shape[1]} features ({len(genes)} SNV genes) -> {args.out}")


def cmd_select_features(args):
    fm = genomics.FeatureMatrix.load(args.matrix)
    idx = genomics.select_top_k(genomics.chi2_scores(fm), min(args.k, fm.shape[1]))
    sel = fm.select(idx)
    sel.save(args.out)
    print(f"kept {len(idx)} of {fm.shape[1]} features -> {args.out}")


def cmd_train(args):
    fm = genomics.FeatureMatrix.load(args.matrix)
    y = fm.labels
    if y is None:
        raise SystemExit("feature matrix carries no labels")
    tr, te = genomics.stratified_split(y, seed=args.seed)
    K = int(y.max() + 1)
    if args.lam is None:
        lam, cv = genomics.cross_validate_lambda(fm.values[tr], y[tr], seed=args.seed,
                                                 epochs=args.epochs, n_classes=K)
        print("cv accuracy: " + ", ".join(f"{k:g}={v:.4f}" for k, v in cv.items()))
    else:
        lam = args.lam
    model = genomics.train_lr_l1(fm.values[tr], y[tr], lam, epochs=args.epochs, n_classes=K)
    scores = genomics.predict_proba(fm.values[te], model)
    metrics = genomics.evaluate(genomics.predict(fm.values[te], model), y[te], scores, K)
    metrics["lambda"] = lam
    genomics.write_metrics(metrics, args.metrics_json, args.roc_csv)
    moduli, n = _moduli(args.params_preset)
    ModelFile(fm.feature_names, model.W, model.b, ScalingConfig(), moduli, n).save(args.model)
    print(f"lambda={lam:g} test accuracy={metrics['accuracy']:.4f} "
          f"micro AUC={metrics['micro_auc']:.4f} -> {args.model}")


def cmd_encrypt(args):
    keys = ClientKeys.load(args.keys_dir, need_secret=False)
    names = ModelFile.load(args.model).feature_names if args.model else None
    X = _load_features(args.input, args.samples, names)
    req = client_prepare(X, keys.public, ScalingConfig(), "", keys.twin)
    Path(args.out).write_bytes(req.to_payload())
    print(f"{req.X.ciphertext_count()} ciphertexts for {X.shape[0]} x {X.shape[1]} -> {args.out}")


def cmd_decrypt(args):
    keys = ClientKeys.load(args.keys_dir)
    resp = InferResponse.from_payload(Path(args.response).read_bytes())
    res = client_finalize(resp, keys.secret, ScalingConfig(), keys.twin)
    _write_labels(res, args.out)


def _write_labels(res, out):
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "label"] + [f"score_{k}" for k in range(res.scores.shape[1])])
        for i, (lab, sc) in enumerate(zip(res.labels, res.scores)):
            w.writerow([i, int(lab)] + [f"{v:.6f}" for v in sc])
    finally:
        if out:
            fh.close()


def cmd_serve(args):
    serve(args.address, args.model, workers=_threads(args))


def cmd_infer(args):
    keys = ClientKeys.load(args.keys_dir)
    with Connection(args.address) as conn:
        client = InferenceClient(keys, conn)
        start = time.perf_counter()
        ack = client.open()
        names = ModelFile.load(args.model).feature_names if args.model else None
        X = _load_features(args.features, args.samples, names)
        if X.shape[1] != ack.f:
            raise SystemExit(f"server model expects {ack.f} features, file has {X.shape[1]}")
        res = client.infer(X, batch_rows=args.batch_rows)
        elapsed = time.perf_counter() - start
    _write_labels(res, args.out)
    print(f"{X.shape[0]} samples in {elapsed:.3f} s", file=sys.stderr)


def cmd_bench(args):
    feats = [int(x) for x in args.features.split(",")]
    keys = ClientKeys.generate(preset_params(args.params_preset))
    results = []
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        for f in feats:
            case = bench.BenchCase(f, args.samples, args.outputs, args.seed)
            results.append(bench.run_packed(case, keys, batch_rows=args.batch_rows, workers=_threads(args)))
            if args.baseline:
                results.append(bench.run_baseline(case, keys))
            for r in results[-2 if args.baseline else -1:]:
                log.info("%s f=%d total %.2f s exact=%s", r.method, f, r.total, r.exact)
        bench.write_csv(results, out)
    finally:
        if args.out:
            out.close()
    if not all(r.exact for r in results):
        raise SystemExit("decrypted results differ from the plaintext oracle")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heinfer", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    def preset(sp):
        sp.add_argument("--params-preset", choices=PRESETS, default="paper8192")

    sp = add("keygen", cmd_keygen, "generate secret, public and Galois key files")
    sp.add_argument("--keys-dir", required=True)
    preset(sp)

    sp = add("synth", cmd_synth, "write a synthetic cohort as TSV files")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--classes", type=int, default=11)
    sp.add_argument("--genes", type=int, default=400)
    sp.add_argument("--patients", type=int, default=2000)
    sp.add_argument("--signal", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("encode-features", cmd_encode_features, "SNV/CNV TSVs to a feature matrix")
    sp.add_argument("--snv", required=True)
    sp.add_argument("--cnv", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--top-genes", type=int, default=10000)
    sp.add_argument("--mode", choices=genomics.SNV_MODES, default="impact")
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")

    sp = add("select-features", cmd_select_features, "keep the top-k features by chi-squared score")
    sp.add_argument("--matrix", required=True)
    sp.add_argument("--k", type=int, default=16384)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "fit the L1 logistic regression and write a model file")
    sp.add_argument("--matrix", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--epochs", type=int, default=10000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--metrics-json")
    sp.add_argument("--roc-csv")
    preset(sp)

    sp = add("encrypt", cmd_encrypt, "encrypt a feature file into an inference request payload")
    sp.add_argument("--keys-dir", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--model", help="reorder columns to this model's feature names")
    sp.add_argument("--samples", type=int)
    sp.add_argument("--out", required=True)

    sp = add("decrypt", cmd_decrypt, "decrypt an inference response payload to labels")
    sp.add_argument("--keys-dir", required=True)
    sp.add_argument("--response", required=True)
    sp.add_argument("--out")

    sp = add("serve", cmd_serve, "run the inference server")
    sp.add_argument("--model", required=True)
    sp.add_argument("--address", default="127.0.0.1:7700")
    sp.add_argument("--threads", type=int)

    sp = add("infer", cmd_infer, "send features to a server and print labels")
    sp.add_argument("--keys-dir", required=True)
    sp.add_argument("--address", default="127.0.0.1:7700")
    sp.add_argument("--features", required=True, help="FMTX or CSV feature file")
    sp.add_argument("--model", help="reorder columns to this model's feature names")
    sp.add_argument("--samples", type=int)
    sp.add_argument("--batch-rows", type=int, default=64)
    sp.add_argument("--out")

    sp = add("bench", cmd_bench, "time encryption/computation/decryption on random data")
    sp.add_argument("--features", default="16384,24576,32768,40960")
    sp.add_argument("--samples", type=int, default=543)
    sp.add_argument("--outputs", type=int, default=11)
    sp.add_argument("--baseline", action="store_true", help="also time the sample-batched comparator")
    sp.add_argument("--batch-rows", type=int, default=64)
    sp.add_argument("--threads", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    preset(sp)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
