# Headless avatar scene template.
#
# Invoked as:
#   blender --background --python-exit-code 1 --python scene.py -- \
#       out_dir=DIR views=portrait,full_body resolution=512x512 seed=N
#
# The snippet between the region markers at the bottom of this file is not
# executed in place. _run_snippet() compiles it under the name "<snippet>"
# so traceback line numbers are relative to the snippet body. On failure a
# trace.json is written to out_dir:
#   {"error": <type or "plugin_unavailable">, "message": str,
#    "line": int|null, "excerpt": str}

import json
import os
import sys
import traceback

REGION_START = "# region RENDER_SNIPPET"
REGION_END = "# endregion"

# Fixed scene parameters. Arbitrary but constant across every render.
CAMERAS = {
    "portrait": {"location": (0.0, -1.1, 1.62), "rotation": (1.5708, 0.0, 0.0), "lens": 85.0},
    "full_body": {"location": (0.0, -5.2, 0.95), "rotation": (1.5708, 0.0, 0.0), "lens": 50.0},
}
KEY_LIGHT = {"location": (1.5, -2.5, 2.8), "energy": 900.0, "size": 2.0}
FILL_LIGHT = {"location": (-2.0, -1.5, 1.8), "energy": 300.0, "size": 3.0}
SAMPLES = 64


def _args():
    argv = sys.argv[sys.argv.index("--") + 1:] if "--" in sys.argv else []
    opts = dict(a.split("=", 1) for a in argv if "=" in a)
    width, height = (int(x) for x in opts.get("resolution", "512x512").split("x"))
    return {
        "out_dir": opts.get("out_dir", "."),
        "views": [v for v in opts.get("views", "portrait,full_body").split(",") if v],
        "resolution": (width, height),
        "seed": int(opts.get("seed", "0")),
    }


ARGS = _args()


def _write_trace(kind, message, line=None, excerpt=""):
    os.makedirs(ARGS["out_dir"], exist_ok=True)
    with open(os.path.join(ARGS["out_dir"], "trace.json"), "w", encoding="utf-8") as fh:
        json.dump({"error": kind, "message": message, "line": line, "excerpt": excerpt}, fh)


def _snippet_source():
    with open(os.path.abspath(__file__), encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    start = max(i for i, l in enumerate(lines) if l.strip() == REGION_START)
    end = next(i for i in range(start + 1, len(lines)) if lines[i].strip() == REGION_END)
    return "\n".join(lines[start + 1:end])


def _run_snippet():
    source = _snippet_source()
    body_lines = source.split("\n")
    namespace = {"__name__": "__snippet__"}
    try:
        exec(compile(source, "<snippet>", "exec"), namespace)
    except Exception as exc:
        line = None
        for frame in traceback.extract_tb(exc.__traceback__):
            if frame.filename == "<snippet>":
                line = frame.lineno
        if isinstance(exc, SyntaxError) and exc.filename == "<snippet>":
            line = exc.lineno
        excerpt = body_lines[line - 1] if line and 0 < line <= len(body_lines) else ""
        _write_trace(type(exc).__name__, str(exc), line, excerpt)
        return False
    return True


def _setup_scene(bpy):
    scene = bpy.context.scene
    scene.render.engine = "CYCLES"
    scene.cycles.samples = SAMPLES
    scene.cycles.seed = ARGS["seed"]
    scene.cycles.use_denoising = False
    scene.render.resolution_x, scene.render.resolution_y = ARGS["resolution"]
    scene.render.image_settings.file_format = "PNG"
    for spec in (KEY_LIGHT, FILL_LIGHT):
        light = bpy.data.lights.new(name="forge_light", type="AREA")
        light.energy = spec["energy"]
        light.size = spec["size"]
        obj = bpy.data.objects.new(name="forge_light", object_data=light)
        obj.location = spec["location"]
        scene.collection.objects.link(obj)
    cam_data = bpy.data.cameras.new("forge_camera")
    cam = bpy.data.objects.new("forge_camera", cam_data)
    scene.collection.objects.link(cam)
    scene.camera = cam
    return scene, cam


def _render_views(bpy):
    scene, cam = _setup_scene(bpy)
    for view in ARGS["views"]:
        spec = CAMERAS[view]
        cam.location = spec["location"]
        cam.rotation_euler = spec["rotation"]
        cam.data.lens = spec["lens"]
        scene.render.filepath = os.path.join(ARGS["out_dir"], view + ".png")
        bpy.ops.render.render(write_still=True)


def _main():
    try:
        import bpy
    except ImportError as exc:
        _write_trace("renderer_unavailable", str(exc))
        return 1
    try:
        import HumGen3D  # noqa: F401
    except ImportError as exc:
        _write_trace("plugin_unavailable", str(exc))
        return 1
    if not _run_snippet():
        return 1
    try:
        _render_views(bpy)
    except Exception as exc:
        _write_trace("render_failed", str(exc))
        return 1
    return 0


raise SystemExit(_main())

# region RENDER_SNIPPET
{{RENDER_SNIPPET}}
# endregion
