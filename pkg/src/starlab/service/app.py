"""FastAPI service wrapping the experiment lab.

Training and sweeps run as background jobs (they take minutes to hours);
everything else answers synchronously. The CLI is a thin client of these
endpoints.
"""

from __future__ import annotations

import json
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..analysis import latent_table, write_latent_csv
from ..errors import ConfigError
from ..experiments import (
    ExperimentManifest,
    _config_from_dict,
    default_output_root,
    execute_run,
    export,
    export_dynamics,
    load_run_config,
    load_run_record,
    run_manifest,
    _load_run_testset,
    _run_model,
)
from ..sampling import decode_testset
from ..stargraph import TaskVariant, build_testset, save_testset
from .jobs import JobRegistry
from .schemas import (
    DynamicsRequest,
    DynamicsResponse,
    EvalRequest,
    EvalResponse,
    ExportRequest,
    ExportResponse,
    JobOut,
    LatentRequest,
    LatentResponse,
    RunStatusOut,
    SweepRequest,
    TestsetRequest,
    TestsetResponse,
    TrainRequest,
)


def _job_out(job) -> JobOut:
    return JobOut(job_id=job.job_id, kind=job.kind, state=job.state, detail=job.detail, error=job.error)


def create_app() -> FastAPI:
    app = FastAPI(title="starlab", version=__version__)
    jobs = JobRegistry()
    app.state.jobs = jobs

    @app.exception_handler(ConfigError)
    async def config_error_handler(request, exc):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/testsets", response_model=TestsetResponse)
    def gen_testset(req: TestsetRequest):
        spec = req.spec.to_spec()
        variant = TaskVariant.parse(req.variant)
        ts = build_testset(spec, req.size, req.seed, variant=variant, edge_order=req.edge_order)
        out = Path(req.out) if req.out else (
            default_output_root() / "testsets"
            / f"g{spec.d}x{spec.l}n{spec.pool_size}-{variant.kind}-{req.size}-{req.seed}" / "testset.strp"
        )
        save_testset(ts, out)
        return TestsetResponse(path=str(out), size=ts.size,
                               seq_len=int(ts.prefixes.shape[1] + ts.regions.shape[1]), variant=variant.label)

    @app.post("/runs", response_model=JobOut)
    def submit_run(req: TrainRequest):
        config = req.to_config()
        root = Path(req.output_root) if req.output_root else default_output_root()
        manifest = ExperimentManifest(
            name=req.experiment, runs=[config], output_root=root,
            testset_size=req.testset_size, testset_seed=req.testset_seed,
        )

        def work(progress):
            def on_eval(record, point):
                progress(examples_seen=point.examples_seen, step=point.step,
                         exact_match=point.exact_match, evals=len(record.evals))
            run_dir, record = execute_run(manifest, config, on_eval=on_eval)
            return {
                "run_dir": str(run_dir),
                "converged": record.converged,
                "examples_seen": record.examples_seen,
                "samples_to_convergence": record.samples_to_convergence,
                "final_exact_match": record.evals[-1].exact_match if record.evals else None,
            }

        from ..experiments import run_dir_for

        job = jobs.submit("train", work, detail={"run_dir": str(run_dir_for(manifest, config))})
        return _job_out(job)

    @app.post("/sweeps", response_model=JobOut)
    def submit_sweep(req: SweepRequest):
        import itertools

        run_dicts = []
        if req.sweep:
            axes = {k: v if isinstance(v, list) else [v] for k, v in req.sweep.items()}
            keys = sorted(axes)
            for combo in itertools.product(*(axes[k] for k in keys)):
                run_dicts.append({**req.defaults, **dict(zip(keys, combo))})
        for entry in req.runs:
            run_dicts.append({**req.defaults, **entry})
        if not run_dicts:
            configs = []
        else:
            configs = [_config_from_dict(d) for d in run_dicts]
        manifest = ExperimentManifest(
            name=req.name,
            runs=configs,
            output_root=Path(req.output_root) if req.output_root else default_output_root(),
            testset_size=req.testset_size,
            testset_seed=req.testset_seed,
            workers=req.workers,
        )

        def work(progress):
            def on_event(name, record, point):
                progress(last_run=name, examples_seen=point.examples_seen,
                         exact_match=point.exact_match)
            results = run_manifest(manifest, on_event=on_event)
            return {
                "runs": [
                    {"run_dir": str(path), "converged": record.converged,
                     "samples_to_convergence": record.samples_to_convergence}
                    for path, record in results
                ]
            }

        job = jobs.submit("sweep", work, detail={"runs": len(configs), "name": req.name})
        return _job_out(job)

    @app.get("/jobs", response_model=list[JobOut])
    def list_jobs():
        return [_job_out(j) for j in jobs.list()]

    @app.get("/jobs/{job_id}", response_model=JobOut)
    def get_job(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id}")
        return _job_out(job)

    @app.get("/runs/{run_dir:path}/status", response_model=RunStatusOut)
    def run_status(run_dir: str):
        status_path = Path(run_dir) / "status.json"
        if not status_path.exists():
            raise HTTPException(status_code=404, detail=f"no status.json under {run_dir}")
        status = json.loads(status_path.read_text())
        return RunStatusOut(run_dir=run_dir, **status)

    @app.post("/eval", response_model=EvalResponse)
    def eval_run(req: EvalRequest):
        config, blob = load_run_config(Path(req.run_dir))
        testset = _load_run_testset(Path(req.run_dir), blob)
        model = _run_model(Path(req.run_dir), config)
        preds, golds, _ = decode_testset(
            model, testset, eval_size=req.eval_size, steps=req.steps,
            commit_per_step=req.commit_per_step, policy=req.policy, hint_k=req.hint_k,
        )
        em = float((preds == golds).all(axis=1).mean())
        per_pos = (preds == golds).mean(axis=0).tolist()
        return EvalResponse(exact_match=em, per_position=per_pos,
                            eval_size=len(preds), hint_k=req.hint_k)

    @app.post("/decode-dynamics", response_model=DynamicsResponse)
    def decode_dynamics(req: DynamicsRequest):
        csv_path, rho = export_dynamics(
            req.run_dir, out=req.out, decode_size=req.decode_size,
            steps=req.steps, commit_per_step=req.commit_per_step, policy=req.policy,
        )
        return DynamicsResponse(csv_path=str(csv_path), spearman=rho)

    @app.post("/probe-latent", response_model=LatentResponse)
    def probe_latent(req: LatentRequest):
        run_dir = Path(req.run_dir)
        config, blob = load_run_config(run_dir)
        testset = _load_run_testset(run_dir, blob)
        model = _run_model(run_dir, config)
        rows = latent_table(model, testset.instances()[: min(req.instances, testset.size)],
                            layers=req.layers, pool=req.pool)
        out = Path(req.out) if req.out else run_dir / "exports" / "latent.csv"
        write_latent_csv(rows, out)
        layers = {r["layer"] for r in rows}
        per_layer = len(rows) // max(1, len(layers))
        return LatentResponse(csv_path=str(out), rows=len(rows), bins_per_layer=per_layer)

    @app.post("/exports", response_model=ExportResponse)
    def run_export(req: ExportRequest):
        kw = {}
        if req.what == "dynamics":
            kw["decode_size"] = req.decode_size
        if req.what == "latent":
            kw["instances"] = req.instances
        files = export(req.run_dirs, req.what, out=req.out, **kw)
        return ExportResponse(files=[str(f) for f in files])

    return app
