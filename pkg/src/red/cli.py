"""Command-line client for the compression service.

Every command talks HTTP to the FastAPI app: against a remote server when
`--server` (or RED_SERVER) is set, otherwise against an in-process
instance, so no daemon is needed for local work. The CLI renders numbers
computed by the service; it never recomputes them.
"""

from __future__ import annotations

import base64
import json
import sys
from pathlib import Path

import click


def _client(server):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=600.0)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # starlette testclient import chatter
        from fastapi.testclient import TestClient

    from .service.app import app

    return TestClient(app)


def _post(client, path, payload, mismatch_exit=None):
    resp = client.post(path, json=payload)
    if resp.status_code == 409 and mismatch_exit is not None:
        click.echo(f"error: {resp.json().get('detail', resp.text)}", err=True)
        sys.exit(mismatch_exit)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        click.echo(f"error: {detail}", err=True)
        sys.exit(1)
    return resp.json()


def _b64_of(path: str) -> str:
    return base64.b64encode(Path(path).read_bytes()).decode("ascii")


def _write_model(b64: str, path: str) -> None:
    Path(path).write_bytes(base64.b64decode(b64))


_pipeline_options = [
    click.option("--tau", default=0.0, show_default=True,
                 help="mean mode-collapse contrast in percent of each layer's weight range"),
    click.option("--tau-strategy", default="constant", show_default=True,
                 type=click.Choice(["block", "constant", "linear_ascending", "linear_descending"])),
    click.option("--alpha", default=0.0, show_default=True, help="mean neuron-merge fraction (0-1)"),
    click.option("--alpha-strategy", default="block", show_default=True,
                 type=click.Choice(["block", "constant", "linear_ascending", "linear_descending"])),
    click.option("--rel-tol", default=1e-6, show_default=True, help="separation rank tolerance"),
    click.option("--fold-bn/--no-fold-bn", default=True, show_default=True,
                 help="fold batchnorm into the preceding layer before hashing"),
    click.option("--hash-bias/--no-hash-bias", default=True, show_default=True,
                 help="pool biases with weights when hashing"),
    click.option("--distance-bias/--distance-no-bias", default=True, show_default=True,
                 help="include bias entries in merge distance vectors"),
    click.option("--grid-size", default=2048, show_default=True, help="KDE grid points"),
    click.option("--bandwidth", default=None, type=float, help="KDE bandwidth override"),
    click.option("--order", default="merge-first", show_default=True,
                 type=click.Choice(["merge-first", "separate-first"])),
    click.option("--seed", default=0, show_default=True),
    click.option("--resolution", nargs=2, default=(8, 8), show_default=True, type=int,
                 help="input height/width for conv models (FLOPs + logit delta)"),
    click.option("--report", "report_path", default=None, help="report JSON path (default: OUTPUT.report.json)"),
    click.option("--json", "as_json", is_flag=True, help="print the full JSON report to stdout"),
]


def _with_pipeline_options(fn):
    for opt in reversed(_pipeline_options):
        fn = opt(fn)
    return fn


@click.group()
@click.option("--server", envvar="RED_SERVER", default=None,
              help="service URL; defaults to an in-process instance")
@click.version_option()
@click.pass_context
def main(ctx, server):
    """Data-free structured compression: hash, merge, separate."""
    ctx.obj = server


def _run_stages(ctx, input, output, stages, kw):
    options = {
        "tau": kw["tau"] / 100.0,  # percent on the CLI, fraction on the wire
        "tau_strategy": kw["tau_strategy"],
        "alpha": kw["alpha"],
        "alpha_strategy": kw["alpha_strategy"],
        "rel_tol": kw["rel_tol"],
        "fold_bn": kw["fold_bn"],
        "hash_bias": kw["hash_bias"],
        "distance_bias": kw["distance_bias"],
        "grid_size": kw["grid_size"],
        "seed": kw["seed"],
        "stages": list(stages),
        "order": kw["order"],
        "bandwidth": kw["bandwidth"],
        "resolution": list(kw["resolution"]),
    }
    client = _client(ctx.obj)
    data = _post(client, "/compress", {"model_b64": _b64_of(input), "options": options})
    _write_model(data["model_b64"], output)
    report = data["report"]
    report_path = kw["report_path"] or f"{output}.report.json"
    Path(report_path).write_text(json.dumps(report, indent=2, sort_keys=True))
    if kw["as_json"]:
        click.echo(json.dumps(report, indent=2, sort_keys=True))
    else:
        t = report["total"]
        click.echo(
            f"params {t['params_before']} -> {t['params_after']} "
            f"({t['removed_params_pct']:.2f}% removed), "
            f"flops {t['flops_before']} -> {t['flops_after']} "
            f"({t['removed_flops_pct']:.2f}% removed)"
        )
        click.echo(f"zip ratio {report['zip_ratio']:.3f}; report: {report_path}")


@main.command()
@click.argument("input", type=click.Path(exists=True, dir_okay=False))
@click.argument("output", type=click.Path(dir_okay=False))
@click.option("--stages", default="hash,merge,separate", show_default=True,
              help="comma-separated subset of hash,merge,separate")
@_with_pipeline_options
@click.pass_context
def run(ctx, input, output, stages, **kw):
    """Run the full pipeline (or STAGES) on INPUT, write OUTPUT + report."""
    _run_stages(ctx, input, output, [s.strip() for s in stages.split(",") if s.strip()], kw)


def _single_stage(name, doc):
    @main.command(name=name, help=doc)
    @click.argument("input", type=click.Path(exists=True, dir_okay=False))
    @click.argument("output", type=click.Path(dir_okay=False))
    @_with_pipeline_options
    @click.pass_context
    def cmd(ctx, input, output, **kw):
        _run_stages(ctx, input, output, [name], kw)

    return cmd


hash_cmd = _single_stage("hash", "Hash INPUT's weight distributions, write OUTPUT + report.")
merge_cmd = _single_stage("merge", "Merge similar neurons of INPUT, write OUTPUT + report.")
separate_cmd = _single_stage("separate", "Separate INPUT's convolutions, write OUTPUT + report.")


@main.command()
@click.argument("model_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("model_b", type=click.Path(exists=True, dir_okay=False))
@click.option("--inputs", default=16, show_default=True, help="number of seeded random inputs")
@click.option("--seed", default=0, show_default=True)
@click.option("--tol", default=1e-6, show_default=True, help="max |logit delta| to accept")
@click.option("--resolution", nargs=2, default=(8, 8), show_default=True, type=int)
@click.pass_context
def verify(ctx, model_a, model_b, inputs, seed, tol, resolution):
    """Compare two models on seeded inputs; exit 0 iff within --tol.

    Exit codes: 0 equivalent, 1 beyond tolerance, 2 output dims differ.
    """
    client = _client(ctx.obj)
    data = _post(
        client,
        "/verify",
        {
            "model_a_b64": _b64_of(model_a),
            "model_b_b64": _b64_of(model_b),
            "inputs": inputs,
            "seed": seed,
            "tolerance": tol,
            "resolution": list(resolution),
        },
        mismatch_exit=2,
    )
    click.echo(
        f"max delta {data['max_delta']:.6g}, mean delta {data['mean_delta']:.6g}, "
        f"top1-top2 gap {data['gap_mean']:.6g} +/- {data['gap_std']:.6g}"
    )
    sys.exit(0 if data["within_tolerance"] else 1)


@main.command()
@click.argument("model", type=click.Path(exists=True, dir_okay=False))
@click.option("--baseline", default=None, type=click.Path(exists=True, dir_okay=False),
              help="uncompressed model to compare against")
@click.option("--resolution", nargs=2, default=(32, 32), show_default=True, type=int)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def report(ctx, model, baseline, resolution, as_json):
    """Print parameter/FLOPs counts; with --baseline also removed-% and zip ratio."""
    client = _client(ctx.obj)
    payload = {"model_b64": _b64_of(model), "resolution": list(resolution)}
    if baseline:
        payload["baseline_b64"] = _b64_of(baseline)
    data = _post(client, "/report", payload)
    if as_json:
        click.echo(json.dumps(data, indent=2, sort_keys=True))
    elif baseline:
        from .metrics import report_text

        click.echo(report_text(data))
    else:
        t = data["total"]
        click.echo(
            f"params {t['params']}, flops {t['flops']} "
            f"(+{t['elementwise_flops']} elementwise)"
        )


@main.command()
@click.argument("kind", type=click.Choice(
    ["duplicates", "multimodal", "separable-conv", "convnet", "residual", "random"]))
@click.argument("output", type=click.Path(dir_okay=False))
@click.option("--seed", default=0, show_default=True)
@click.option("--layers", default=4, show_default=True)
@click.option("--width", default=16, show_default=True)
@click.option("--in-features", default=8, show_default=True)
@click.option("--classes", default=5, show_default=True)
@click.option("--channels", default=4, show_default=True)
@click.option("--kernel", default=3, show_default=True)
@click.option("--duplicate-fraction", default=0.5, show_default=True)
@click.option("--separable-fraction", default=1.0, show_default=True)
@click.option("--weight-modes", default=16, show_default=True)
@click.option("--modes", default="-1,1", show_default=True, help="comma-separated mode centers")
@click.option("--noise", default=0.0, show_default=True)
@click.option("--residual-blocks", default=1, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="print the ground truth JSON")
@click.pass_context
def synth(ctx, kind, output, **kw):
    """Write a seeded synthetic model with planted structure to OUTPUT."""
    client = _client(ctx.obj)
    payload = {
        "kind": kind,
        "seed": kw["seed"],
        "layers": kw["layers"],
        "width": kw["width"],
        "in_features": kw["in_features"],
        "classes": kw["classes"],
        "channels": kw["channels"],
        "kernel": kw["kernel"],
        "duplicate_fraction": kw["duplicate_fraction"],
        "separable_fraction": kw["separable_fraction"],
        "weight_modes": kw["weight_modes"],
        "modes": [float(v) for v in kw["modes"].split(",")],
        "noise": kw["noise"],
        "residual_blocks": kw["residual_blocks"],
    }
    data = _post(client, "/synth", payload)
    _write_model(data["model_b64"], output)
    click.echo(f"wrote {data['name']} to {output}")
    if kw["as_json"] and data.get("truth") is not None:
        click.echo(json.dumps(data["truth"], indent=2, sort_keys=True))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Run the compression service with uvicorn."""
    import uvicorn

    uvicorn.run("red.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
