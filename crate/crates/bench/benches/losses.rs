use criterion::{black_box, criterion_group, criterion_main, Criterion};
use dynrefine::ba::{ba_objective, chain_tracks, WindowProblem, GRID_SIZE, WINDOW_LEN};
use dynrefine::cvd::{build_problem, cvd_objective, CvdConfig};
use dynrefine::synth::{frame_bundles, generate, perturb, AaBox, MoverSpec, Motion, NoiseModel, SceneSpec};
use dynrefine::track4d::{track_objective, Track3D};
use nalgebra::Vector3;

fn scene_spec() -> SceneSpec {
    let mut spec = SceneSpec::default();
    spec.movers.push(MoverSpec {
        id: 1,
        shape: AaBox { center: Vector3::new(0.2, 0.1, 2.5), half: Vector3::new(0.6, 0.6, 0.4) },
        motion: Motion::Linear { velocity: Vector3::new(-0.06, 0.0, 0.02) },
    });
    spec
}

fn losses(c: &mut Criterion) {
    let scene = generate(&scene_spec()).unwrap();
    let noise = NoiseModel { depth_sigma: 0.1, track_depth_sigma: 0.03, ..Default::default() };
    let obs = perturb(&scene, &noise, 0);
    let masks = scene.dynamic_masks();
    let frames = frame_bundles(&obs, &masks);

    let window = WindowProblem {
        first_frame: 0,
        poses: scene.poses[..WINDOW_LEN].to_vec(),
        intrinsics: scene.intrinsics,
        tracks: chain_tracks(&frames[..WINDOW_LEN], GRID_SIZE, true).unwrap(),
    };
    c.bench_function("ba_objective_window", |b| b.iter(|| ba_objective(black_box(&window), 0.1).unwrap()));

    let cfg = CvdConfig { resolution: Some((32, 24)), ..Default::default() };
    let problem = build_problem(&frames, &scene.poses, &scene.intrinsics, Some(&masks), &cfg).unwrap();
    c.bench_function("cvd_objective_32x24x12", |b| b.iter(|| cvd_objective(black_box(&problem), &cfg)));

    let tracks: Vec<Track3D> = obs
        .tracks
        .tracks
        .iter()
        .map(|r| Track3D::from_record(r, &scene.poses, &obs.tracks.intrinsics).unwrap())
        .collect();
    c.bench_function("track_objective_all", |b| {
        b.iter(|| {
            for t in &tracks {
                black_box(track_objective(t, 0.5, 0.1).unwrap());
            }
        })
    });
}

criterion_group!(benches, losses);
criterion_main!(benches);
