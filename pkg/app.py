import streamlit as st
import numpy as np
import plotly.graph_objects as go
import traceback
import json
import math
from pathlib import Path

import field as fld
import geodata
import meshing
import metrics
import renderer
from autodiff import read_training_log
from cameras import Orthographic, Panorama, Perspective, Pose
from config import Config, load_config
from errors import SceneKitError
from sensitivity import create_loss_curves_plot, render_sensitivity_analysis
from utils_bq import RunRegistry


# ============= App Configuration =============
st.set_page_config(layout="wide", page_title="Scene Fitting Dashboard")

# ============= Run Registry Initialization =============
@st.cache_resource
def get_registry():
    # registry is optional: without a [gcp] section in st.secrets the dashboard works on local runs only
    try:
        if "gcp" not in st.secrets:
            return None
    except FileNotFoundError:
        return None
    credentials = dict(st.secrets["gcp"])
    table_id = st.secrets.get("registry", {}).get("table_id", "scenekit.runs.registry")
    return RunRegistry(table_id=table_id, credentials=credentials)

try:
    registry = get_registry()
except Exception as e:
    st.error(f"Failed to initialize run registry: {str(e)}")
    registry = None

# ============= Session State Initialization =============
def init_session_state():
    if 'user' not in st.session_state:
        st.session_state.user = None
    if 'loaded_config' not in st.session_state:
        st.session_state.loaded_config = None
    if 'current_run_id' not in st.session_state:
        st.session_state.current_run_id = None

init_session_state()

# ============= Run Loading =============
@st.cache_resource
def load_field(path: str, mtime: float) -> fld.TriPlaneField:
    return fld.load_checkpoint(path)

@st.cache_data
def load_log(path: str, mtime: float):
    return read_training_log(path)

def find_run_files(run_dir: Path) -> dict:
    """Checkpoint, training log and saved config of a run directory."""
    files = {}
    checkpoints = sorted(run_dir.glob("*.tpf"))
    if checkpoints:
        files["checkpoint"] = checkpoints[0]
    logs = sorted(run_dir.glob("*.log.jsonl"))
    if logs:
        files["log"] = logs[0]
    configs = sorted(run_dir.glob("*.config.json"))
    if configs:
        files["config"] = configs[0]
    return files

def current_config(files: dict) -> Config:
    if st.session_state.loaded_config is not None:
        return Config.from_dict(st.session_state.loaded_config).validate()
    return load_config(files.get("config"))

# ============= Plot Builders =============
def create_image_figure(image: np.ndarray, title: str) -> go.Figure:
    fig = go.Figure(go.Image(z=np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)))
    fig.update_layout(title=title, margin=dict(l=10, r=10, t=40, b=10), height=420)
    return fig

def create_heatmap(values: np.ndarray, title: str, colorscale: str = "Viridis", zmid=None) -> go.Figure:
    fig = go.Figure(go.Heatmap(z=values, colorscale=colorscale, zmid=zmid))
    fig.update_layout(title=title, yaxis=dict(autorange="reversed", scaleanchor="x"),
                      margin=dict(l=10, r=10, t=40, b=10), height=450)
    return fig

def create_mesh_figure(mesh: meshing.Mesh) -> go.Figure:
    v, f = mesh.vertices, mesh.faces
    colors = None
    if mesh.colors is not None:
        rgb = np.round(np.clip(mesh.colors, 0, 1) * 255).astype(int)
        colors = [f"rgb({r},{g},{b})" for r, g, b in rgb]
    fig = go.Figure(go.Mesh3d(x=v[:, 0], y=v[:, 1], z=v[:, 2], i=f[:, 0], j=f[:, 1], k=f[:, 2],
                              vertexcolor=colors, flatshading=True))
    fig.update_layout(scene=dict(aspectmode="data"), margin=dict(l=0, r=0, t=30, b=0), height=600)
    return fig

# ============= Tabs =============
def render_training_tab(files: dict, cfg: Config):
    if "log" not in files:
        st.info("No training log (*.log.jsonl) in this run directory")
        return
    log = load_log(str(files["log"]), files["log"].stat().st_mtime)
    col1, col2 = st.columns([3, 1])
    with col2:
        window = st.slider("Smoothing window", 1, 200, 25)
        log_y = st.checkbox("Log scale", value=True)
        last = log[-1]
        st.metric("Iterations", f"{last['iteration']}")
        st.metric("Last total", f"{last['total']:.4f}")
        psnrs = [r["eval_psnr"] for r in log if "eval_psnr" in r]
        if psnrs:
            st.metric("Hold-out PSNR", f"{psnrs[-1]:.2f} dB")
    with col1:
        st.plotly_chart(create_loss_curves_plot(log, window, log_y), use_container_width=True)
    render_sensitivity_analysis(log, cfg.fit.weights)

def render_view_tab(field: fld.TriPlaneField, cfg: Config):
    ext = field.extent
    col1, col2 = st.columns([1, 2])
    with col1:
        kind = st.selectbox("Camera", ["perspective", "panorama"])
        x = st.number_input("x (m)", value=float(ext.center[0]), step=0.5)
        y = st.number_input("y (m)", value=float(ext.center[1]), step=0.5)
        z = st.number_input("z (m)", value=1.7, step=0.5)
        yaw = st.slider("Yaw (deg)", -180.0, 180.0, 0.0, 1.0)
        pitch = st.slider("Pitch (deg)", -89.0, 89.0, 0.0, 1.0)
        fov = st.slider("FOV (deg)", 30.0, 150.0, 90.0, 1.0, disabled=kind != "perspective")
        size = st.select_slider("Resolution", options=[64, 96, 128, 192, 256], value=128)
        code_index = st.selectbox("Illumination code", list(range(field.codes.shape[0])))
        n_samples = st.slider("Samples per ray", 16, 256, cfg.march.n_samples, 16)
    pose = Pose((x, y, z), math.radians(yaw), math.radians(pitch))
    camera = Perspective(pose, fov, size, size) if kind == "perspective" else Panorama(pose, width=2 * size,
                                                                                        height=size // 2)
    march_cfg = renderer.MarchConfig(n_samples=n_samples, t_far=cfg.march.t_far, chunk_size=cfg.march.chunk_size)
    with col2:
        with st.spinner("Rendering..."):
            out = renderer.render_view(field, field.sky, camera, field.code(code_index), march_cfg)
        st.plotly_chart(create_image_figure(out.rgb, f"{kind} view"), use_container_width=True)
        st.plotly_chart(create_heatmap(np.where(out.valid, out.depth, np.nan), "Depth (m)"),
                        use_container_width=True)

def render_height_tab(field: fld.TriPlaneField, cfg: Config):
    ext = field.extent
    col1, col2 = st.columns([1, 2])
    with col1:
        size = st.select_slider("Height map size", options=[64, 128, 256], value=128)
        dsm_path = st.text_input("Ground-truth DSM (GeoTIFF or .asc)")
        align = st.selectbox("Alignment", ["none", "median"])
        code_index = st.selectbox("Code", list(range(field.codes.shape[0])), key="height_code")
    camera = Orthographic(tuple(ext.center), ext.L, float(ext.upper[2]) + 10.0, size, size)
    with st.spinner("Rendering height map..."):
        height = renderer.render_height(field, field.sky, camera, field.code(code_index), cfg.march)
    with col2:
        st.plotly_chart(create_heatmap(height.values, "Predicted height (m)"), use_container_width=True)
    if not dsm_path:
        return
    try:
        gt = geodata.load_grid(dsm_path)
        pred = geodata.HeightGrid(height.values, gt.transform, gt.crs, height.nodata, "m")
        result = metrics.depth_metrics(pred, gt, align=align)
        cols = st.columns(4)
        cols[0].metric("MAE (m)", f"{result.mae:.2f}")
        cols[1].metric("RMSE (m)", f"{result.rmse:.2f}")
        cols[2].metric("< 2.5 m", f"{result.pct_lt_2_5:.1f}%")
        cols[3].metric("< 7.5 m", f"{result.pct_lt_7_5:.1f}%")
        st.plotly_chart(create_heatmap(pred.values - result.offset - gt.values, "Height error (m)",
                                       colorscale="RdBu", zmid=0.0), use_container_width=True)
        st.session_state.last_report = result.to_dict()
    except SceneKitError as e:
        st.error(f"DSM evaluation failed: {str(e)}")

def render_mesh_tab(field: fld.TriPlaneField, cfg: Config):
    col1, col2 = st.columns([1, 3])
    with col1:
        res = st.select_slider("Grid resolution", options=[32, 48, 64, 96, 128], value=64)
        tau = st.number_input("Density threshold", value=float(cfg.mesh.tau), min_value=0.01, step=0.5)
        code_index = st.selectbox("Code", list(range(field.codes.shape[0])), key="mesh_code")
        build = st.button("Extract mesh")
    if not build:
        return
    with st.spinner("Extracting mesh..."):
        w = field.code(code_index)
        grid = meshing.eval_density_grid(field, w, res, chunk_size=cfg.mesh.chunk_size)
        mesh = meshing.colorize(meshing.marching_cubes(grid, tau), field, w)
    with col1:
        st.json(meshing.mesh_summary(mesh))
    with col2:
        if mesh.is_empty:
            st.warning("No surface at this threshold")
        else:
            st.plotly_chart(create_mesh_figure(mesh), use_container_width=True)

# ============= Registry Management =============
def render_registry_section(cfg: Config):
    st.sidebar.markdown("---")
    st.sidebar.markdown("## Saved Configurations")
    if registry is None:
        st.sidebar.caption("No registry configured (add a [gcp] section to secrets)")
        return
    user = st.sidebar.text_input("User e-mail", value=st.session_state.user or "")
    if not user:
        return
    st.session_state.user = user
    try:
        runs = registry.list_runs(user)
        if runs:
            labels = {f"{r['name']} ({r['kind']}, v{r['version']})": r['id'] for r in runs}
            selected = st.sidebar.selectbox("Run", list(labels))
            col1, col2 = st.sidebar.columns(2)
            with col1:
                if st.button("Load", key="load_run"):
                    run = registry.get_run(labels[selected], user)
                    if run:
                        st.session_state.loaded_config = run["config"]
                        st.session_state.current_run_id = labels[selected]
                        st.rerun()
                    else:
                        st.sidebar.error("Run not found")
            with col2:
                if st.button("Delete", key="delete_run"):
                    registry.delete_run(labels[selected], user)
                    if st.session_state.current_run_id == labels[selected]:
                        st.session_state.current_run_id = None
                        st.session_state.loaded_config = None
                    st.rerun()

        with st.sidebar.expander("Save Configuration", expanded=False):
            report = st.session_state.get("last_report")
            if st.session_state.current_run_id and st.button("Update current", key="update_run"):
                registry.update_run(int(st.session_state.current_run_id), cfg.to_dict(), report, user)
                st.success("Run updated")
            save_name = st.text_input("Name")
            if st.button("Save as new") and save_name:
                st.session_state.current_run_id = registry.save_run(save_name, "dashboard", cfg.to_dict(),
                                                                    report, user)
                st.success("Configuration saved")
    except SceneKitError as e:
        st.sidebar.error(str(e))

def main():
    st.title("Tri-plane Scene Dashboard")
    st.sidebar.title("Run")
    run_dir = Path(st.sidebar.text_input("Run directory", value="runs/latest"))
    if not run_dir.is_dir():
        st.warning(f"{run_dir} is not a directory")
        st.stop()
    files = find_run_files(run_dir)

    try:
        cfg = current_config(files)
    except SceneKitError as e:
        st.error(f"Invalid configuration: {str(e)}")
        st.stop()
    render_registry_section(cfg)
    with st.sidebar.expander("Configuration", expanded=False):
        st.code(json.dumps(cfg.to_dict(), indent=2), language="json")

    tabs = st.tabs(["Training", "Render", "Height & DSM", "Mesh"])
    with tabs[0]:
        render_training_tab(files, cfg)
    if "checkpoint" not in files:
        for tab in tabs[1:]:
            with tab:
                st.info("No checkpoint (*.tpf) in this run directory")
        return
    try:
        field = load_field(str(files["checkpoint"]), files["checkpoint"].stat().st_mtime)
    except SceneKitError as e:
        st.error(f"Failed to load checkpoint: {str(e)}")
        return
    with tabs[1]:
        render_view_tab(field, cfg)
    with tabs[2]:
        render_height_tab(field, cfg)
    with tabs[3]:
        render_mesh_tab(field, cfg)

if __name__ == "__main__":
    try:
        main()
    except Exception as e:
        st.error(f"Unexpected error: {str(e)}")
        st.error(traceback.format_exc())
