"""Command line entry points: synth, prep, train, transfer, eval, serve."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


@click.group()
def main():
    """Multi-pollutant emission modeling toolkit."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Plant config JSON; defaults to the built-in 3-regime plant.")
@click.option("--hours", type=int, default=26280)
@click.option("--seed", type=int, default=123)
@click.option("--out", "out_path", type=click.Path(), required=True)
def synth(config_path, hours, seed, out_path):
    """Generate a physics-consistent synthetic plant CSV."""
    from .synthplant import PlantConfig, gen_plant

    cfg = (PlantConfig.from_json(Path(config_path).read_text())
           if config_path else PlantConfig())
    df = gen_plant(cfg, hours, seed=seed)
    df.to_csv(out_path, index_label="timestamp")
    click.echo(f"wrote {len(df)} rows to {out_path}")


@main.command()
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--schema", "schema_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=123)
@click.option("--window", "T", type=int, default=24)
def prep(in_path, schema_path, out_dir, seed, T):
    """Clean, engineer, standardize, window and split a raw CSV."""
    from . import dataio
    from .schema import RawSchema

    schema = (RawSchema.from_json(Path(schema_path).read_text())
              if schema_path else RawSchema())
    df = dataio.load_csv(in_path, schema)
    spec, ws, train_idx, val_idx = dataio.prepare(df, T=T, seed=seed)
    dataio.save_dataset(out_dir, spec, ws, train_idx, val_idx, seed)
    click.echo(f"{len(ws)} windows ({train_idx.size} train / {val_idx.size} val) -> {out_dir}")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--small", is_flag=True, help="Use the desk-scale architecture.")
def train(data_dir, config_path, out_dir, small):
    """Train a source-domain model."""
    from . import dataio
    from .learn import TrainConfig, train_source
    from .model import CPMoEModel, ModelConfig, save_checkpoint

    tc = (TrainConfig(**json.loads(Path(config_path).read_text()))
          if config_path else TrainConfig())
    spec, ws, train_idx, val_idx = dataio.load_dataset(data_dir)
    mc = ModelConfig.small() if small else ModelConfig()
    model = CPMoEModel(mc, seed=tc.seed)
    model, history = train_source(ws.subset(train_idx), ws.subset(val_idx),
                                  model, tc, spec,
                                  history_path=Path(out_dir) / "history.csv")
    best = max(h["val_avg_r2"] for h in history)
    save_checkpoint(out_dir, model, seed=tc.seed,
                    metrics={"val_avg_r2": best},
                    extra={"transform_spec": json.loads(spec.to_json())})
    click.echo(f"trained {len(history)} epochs, best val avg R2 {best:.4f} -> {out_dir}")


@main.command()
@click.option("--source-ckpt", type=click.Path(exists=True), required=True)
@click.option("--source-data", type=click.Path(exists=True), required=True)
@click.option("--target-data", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def transfer(source_ckpt, source_data, target_data, config_path, out_dir):
    """Fine-tune a source checkpoint on a target plant."""
    from . import dataio
    from .learn import TrainConfig, domain_shift, finetune_transfer
    from .model import load_checkpoint, save_checkpoint

    tc = (TrainConfig(**json.loads(Path(config_path).read_text()))
          if config_path else TrainConfig())
    model, _ = load_checkpoint(source_ckpt)
    spec_s, ws_s, tr_s, _ = dataio.load_dataset(source_data)
    spec_t, ws_t, tr_t, va_t = dataio.load_dataset(target_data)

    shift = domain_shift(dataio.invert_targets(spec_s, ws_s.targets[tr_s]),
                         dataio.invert_targets(spec_t, ws_t.targets[tr_t]))
    model, report = finetune_transfer(model, ws_s.subset(tr_s), ws_t.subset(tr_t),
                                      ws_t.subset(va_t), tc, spec_t,
                                      history_path=Path(out_dir) / "history.csv")
    save_checkpoint(out_dir, model, seed=tc.seed, metrics=report,
                    extra={"transform_spec": json.loads(spec_t.to_json())})
    (Path(out_dir) / "shift_report.json").write_text(json.dumps(shift.to_dict(), indent=2))
    click.echo(json.dumps(report, indent=2))


@main.command("eval")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def eval_cmd(ckpt, data_dir, out_path):
    """Score a checkpoint on a dataset's validation split (original units)."""
    import torch

    from . import dataio
    from .evalkit import eur, metric_report
    from .model import load_checkpoint

    model, _ = load_checkpoint(ckpt)
    spec, ws, _, val_idx = dataio.load_dataset(data_dir)
    val = ws.subset(val_idx)
    X = torch.from_numpy(val.features)
    preds, gates = [], []
    with torch.no_grad():
        for i in range(0, X.shape[0], 512):
            y_hat, _, w, _ = model(X[i:i + 512])
            preds.append(y_hat.numpy())
            gates.append(w.numpy())
    y_hat = dataio.invert_targets(spec, np.concatenate(preds))
    y = dataio.invert_targets(spec, val.targets)
    report = metric_report(y, y_hat)
    report["eur_pct"] = dict(zip(["transformer", "cnn", "lstm", "mlp"],
                                 eur(np.concatenate(gates)).tolist()))
    Path(out_path).write_text(json.dumps(report, indent=2))
    click.echo(f"avg R2 {report['average_r2']:.4f} -> {out_path}")


@main.command()
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), default=None)
@click.option("--port", type=int, default=8080)
@click.option("--host", default="127.0.0.1")
@click.option("--static", "static_dir", type=click.Path(), default=None,
              help="Console bundle to mount at /ui.")
def serve(ckpt, data_dir, port, host, static_dir):
    """Serve the digital twin HTTP API."""
    import uvicorn

    from .twinserve import create_app, load_twin

    twin = load_twin(ckpt, data_dir)
    app = create_app(twin, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
