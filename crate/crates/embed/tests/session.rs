use std::sync::OnceLock;
use std::time::Instant;

use image::RgbImage;
use tinyalign::data::{synthetic_dataset, AnnotatedSample, SynthConfig};
use tinyalign::imaging::PixelBox;
use tinyalign::model::{from_bytes, to_bytes, track, ModelConfig, ModelWeights, TrackState, TRACK_MARGIN};
use tinyalign::render::{build_part_mask, ProductSpec};
use tinyalign::train::{bench, TrainConfig, Trainer};
use tinyalign::{FacePart, LandmarkLayout};
use tinyalign_embed::*;

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_text("model.input_size=64\nmodel.heatmap_size=16\nepochs=6\nlambda=10000").unwrap();
    cfg
}

/// A small model trained on synthetic faces, shared by every test here.
fn trained() -> &'static [u8] {
    static BYTES: OnceLock<Vec<u8>> = OnceLock::new();
    BYTES.get_or_init(|| {
        let cfg = small_config();
        let data = synthetic_dataset(256, 11, &SynthConfig::default()).unwrap();
        let (train, val) = data.split_at(224);
        let out = Trainer::new(cfg).unwrap().fit(train, val, None, &mut |_| {}).unwrap();
        to_bytes(&out.best)
    })
}

fn face(seed: u64) -> AnnotatedSample {
    synthetic_dataset(1, seed, &SynthConfig::default()).unwrap().remove(0)
}

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn seed_box(s: &AnnotatedSample) -> [f32; 4] {
    let b = s.face_box(TRACK_MARGIN).unwrap();
    [b.x0 as f32, b.y0 as f32, b.x1 as f32, b.y1 as f32]
}

#[test]
fn create_reports_model_shape() {
    let s = Session::create(trained()).unwrap();
    assert_eq!(s.num_landmarks(), 65);
    assert_eq!(s.input_size(), 64);
    assert!(!s.is_tracking());

    let full = to_bytes(&ModelWeights::zeros(ModelConfig::default()).unwrap());
    assert!(full.len() > 500_000 && full.len() < 700_000);
    assert!(Session::create(&full).is_ok());
}

#[test]
fn bad_model_bytes_have_stable_codes() {
    let bytes = trained();
    let truncated = &bytes[..bytes.len() - 100];
    assert_eq!(Session::create(truncated).err().unwrap().code, ERR_CHECKSUM);
    let mut flipped = bytes.to_vec();
    let at = flipped.len() - 50;
    flipped[at] ^= 0x10;
    assert_eq!(Session::create(&flipped).err().unwrap().code, ERR_CHECKSUM);
    assert_eq!(Session::create(b"not a model").err().unwrap().code, ERR_FORMAT);
    assert_eq!(Session::create(&[]).err().unwrap().code, ERR_FORMAT);
}

#[test]
fn track_contract() {
    let sample = face(3);
    let px = rgba(&sample.image);
    let (w, h) = sample.image.dimensions();
    let mut a = Session::create(trained()).unwrap();
    let mut b = Session::create(trained()).unwrap();

    let frame = FrameBuffer::new(w, h, &px).unwrap();
    assert_eq!(b.track(frame, None).unwrap_err().code, ERR_INVALID_ARGUMENT);
    let out = a.track(frame, Some(seed_box(&sample))).unwrap();
    assert_eq!(out.len(), 2 * a.num_landmarks());
    // sessions do not share tracking state
    assert!(a.is_tracking() && !b.is_tracking());
    assert!(a.track(frame, None).is_ok());

    assert_eq!(FrameBuffer::new(0, 0, &[]).unwrap_err().code, ERR_INVALID_ARGUMENT);
    let off = [1000.0, 1000.0, 1100.0, 1100.0];
    assert_eq!(a.track(frame, Some(off)).unwrap_err().code, ERR_TRACKING_LOST);
    assert!(!a.is_tracking());
}

#[test]
fn repeated_frames_follow_the_core_tracker() {
    let sample = face(21);
    let px = rgba(&sample.image);
    let frame = FrameBuffer::new(sample.image.width(), sample.image.height(), &px).unwrap();
    let weights = from_bytes(trained()).unwrap();
    let seed = seed_box(&sample);
    let mut state = TrackState::seeded(PixelBox::new(seed[0] as f64, seed[1] as f64, seed[2] as f64, seed[3] as f64));
    let mut s = Session::create(trained()).unwrap();
    for k in 0..6 {
        let got = s.track(frame, if k == 0 { Some(seed) } else { None }).unwrap();
        let (want, next) = track(&sample.image, &state, &weights).unwrap();
        assert_eq!(got, want.flat(), "frame {k}");
        state = next;
    }
}

#[test]
fn render_leaves_frames_alone_without_visible_products() {
    let sample = face(4);
    let px = rgba(&sample.image);
    let frame = FrameBuffer::new(sample.image.width(), sample.image.height(), &px).unwrap();
    let lm = sample.landmarks.flat();
    let mut s = Session::create(trained()).unwrap();
    assert_eq!(s.render(frame, &lm, &[]).unwrap(), px);
    assert_eq!(s.render(frame, &lm, &[0, 255, 0, 0, 0, 4]).unwrap(), px);
    assert_eq!(s.render(frame, &lm[1..], &[]).unwrap_err().code, ERR_INVALID_ARGUMENT);
    assert_eq!(s.render(frame, &lm, &[0, 1, 2]).unwrap_err().code, ERR_INVALID_ARGUMENT);
}

#[test]
fn lip_color_stays_inside_the_lip_mask() {
    let sample = face(8);
    let px = rgba(&sample.image);
    let (w, h) = sample.image.dimensions();
    let frame = FrameBuffer::new(w, h, &px).unwrap();
    let product = ProductSpec {
        part: FacePart::LowerLip,
        color: [220, 20, 60],
        opacity: 1.0,
        feather_radius: 2.0,
    };
    let mut s = Session::create(trained()).unwrap();
    let out = s.render(frame, &sample.landmarks.flat(), &encode_products(&[product])).unwrap();
    let mask = build_part_mask(&sample.landmarks, &LandmarkLayout::synthetic65(), product.part, w, h, 2.0).unwrap();
    let mut changed = 0;
    for (i, (a, b)) in px.chunks_exact(4).zip(out.chunks_exact(4)).enumerate() {
        assert_eq!(a[3], b[3]);
        if a != b {
            changed += 1;
            assert!(mask.alpha[i] > 0.0, "pixel {i} changed outside the mask");
        }
    }
    assert!(changed > 20, "only {changed} pixels changed");
}

#[test]
fn c_abi_matches_safe_layer() {
    let bytes = trained();
    let sample = face(5);
    let px = rgba(&sample.image);
    let (w, h) = sample.image.dimensions();
    let seed = seed_box(&sample);
    let products = [2u8, 250, 120, 120, 160, 6, 0, 200, 30, 40, 255, 1];

    let mut safe = Session::create(bytes).unwrap();
    let frame = FrameBuffer::new(w, h, &px).unwrap();
    let want_lm = safe.track(frame, Some(seed)).unwrap();
    let want_px = safe.render(frame, &want_lm, &products).unwrap();

    unsafe {
        let mut s: *mut Session = std::ptr::null_mut();
        assert_eq!(ta_session_create(bytes.as_ptr(), bytes.len(), &mut s), OK);
        assert_eq!(ta_session_num_landmarks(s), 65);
        assert_eq!(ta_session_input_size(s), 64);
        let mut lm = vec![0.0f32; 130];
        let code = ta_session_track(s, px.as_ptr(), px.len(), w, h, seed.as_ptr(), lm.as_mut_ptr(), lm.len());
        assert_eq!(code, OK);
        assert_eq!(lm, want_lm);
        let mut out = vec![0u8; px.len()];
        let code = ta_session_render(
            s,
            px.as_ptr(),
            px.len(),
            w,
            h,
            lm.as_ptr(),
            lm.len(),
            products.as_ptr(),
            products.len(),
            out.as_mut_ptr(),
            out.len(),
        );
        assert_eq!(code, OK);
        assert_eq!(out, want_px);

        let code = ta_session_track(s, px.as_ptr(), 0, 0, 0, std::ptr::null(), lm.as_mut_ptr(), lm.len());
        assert_eq!(code, ERR_INVALID_ARGUMENT);
        ta_session_free(s);

        let mut none: *mut Session = std::ptr::null_mut();
        assert_eq!(ta_session_create(bytes.as_ptr(), 10, &mut none), ERR_FORMAT);
        assert!(none.is_null());
        assert_eq!(ta_session_num_landmarks(none), -1);
    }
}

/// Track plus render on 128×128 frames against the bare forward pass.
#[test]
fn per_frame_cost_report() {
    let weights = ModelWeights::zeros(ModelConfig::default()).unwrap();
    let bytes = to_bytes(&weights);
    let synth = SynthConfig {
        canvas: 128,
        scale: (32.0, 40.0),
        ..SynthConfig::default()
    };
    let sample = synthetic_dataset(1, 2, &synth).unwrap().remove(0);
    let px = rgba(&sample.image);
    let frame = FrameBuffer::new(128, 128, &px).unwrap();
    let products = encode_products(&[
        ProductSpec {
            part: FacePart::UpperLip,
            color: [200, 40, 60],
            opacity: 0.6,
            feather_radius: 2.0,
        },
        ProductSpec {
            part: FacePart::LowerLip,
            color: [200, 40, 60],
            opacity: 0.6,
            feather_radius: 2.0,
        },
        ProductSpec {
            part: FacePart::LeftCheek,
            color: [240, 150, 150],
            opacity: 0.3,
            feather_radius: 6.0,
        },
    ]);
    let runs = 5;
    let forward = bench(&weights, runs).unwrap().median_ms / 1e3;

    let mut s = Session::create(&bytes).unwrap();
    let seed = seed_box(&sample);
    let (mut track_t, mut render_t) = (0.0, 0.0);
    for i in 0..=runs {
        let t = Instant::now();
        let lm = s.track(frame, Some(seed)).unwrap();
        let t1 = t.elapsed().as_secs_f64();
        let t = Instant::now();
        s.render(frame, &sample.landmarks.flat(), &products).unwrap();
        let t2 = t.elapsed().as_secs_f64();
        assert_eq!(lm.len(), 130);
        if i > 0 {
            track_t += t1 / runs as f64;
            render_t += t2 / runs as f64;
        }
    }
    let overhead = (track_t + render_t) / forward - 1.0;
    println!(
        "forward {:.2} ms, track {:.2} ms, render {:.2} ms, overhead {:.0}%",
        forward * 1e3,
        track_t * 1e3,
        render_t * 1e3,
        overhead * 100.0
    );
}
