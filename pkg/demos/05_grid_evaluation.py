"""Grid evaluation: 0.01-degree cell averages, metrics, detection rates and a PGM map."""

# %%
import tempfile
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from iwdqueen import datagen
from iwdqueen.ddm_core import passes_filter, write_mask_pgm, WaterMask
from iwdqueen.evaluation import BBox, GridAggregate, GridSpec, detection_rate, metrics
from iwdqueen.models import build_model, classify, predict_batch
from iwdqueen.training import TrainConfig, train

scene = replace(datagen.bundled_scene("default"), n_tracks=40)
ds = datagen.generate(scene)
recs = [r for r in ds.records if passes_filter(r)]
model = build_model("transformer", 0)
train(model, recs, TrainConfig(epochs=3))
p = predict_batch(model, [r.ddm for r in recs])

# %% Predictions are averaged per cell and compared with the mask's cell labels.
agg = GridAggregate(GridSpec.from_mask(ds.mask))
for r, pi in zip(recs, p):
    agg.add(r.lat, r.lon, float(pi))
agg.add_mask(ds.mask)
m = metrics(agg.confusion())
print(f"{len(agg.scored_cells())} scored cells:", {k: round(v, 3) for k, v in m.as_dict().items()})

# %% Detection rate: detected water points over all points in a box and time window.
obs = [(r.lat, r.lon, r.time, classify(float(pi))) for r, pi in zip(recs, p)]
west = BBox(scene.lat_min, scene.lat_max, scene.lon_min, (scene.lon_min + scene.lon_max) / 2)
start = datetime(2021, 1, 4, tzinfo=timezone.utc)
end = datetime(2021, 1, 10, tzinfo=timezone.utc)
print("whole region:", detection_rate(obs).as_dict())
print("western half, first days:", detection_rate(obs, west, start, end).as_dict())

# %% The predicted map is written as a binary PGM (water = 255, north up).
out = Path(tempfile.mkdtemp()) / "prediction.pgm"
g = agg.grid
write_mask_pgm(WaterMask(g.origin_lat, g.origin_lon, g.cell_size_deg, agg.prediction_raster()), out)
print("map written to", out, f"({out.stat().st_size} bytes)")
