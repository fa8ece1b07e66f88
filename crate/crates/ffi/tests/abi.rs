use std::ffi::{CStr, CString};
use std::ptr;

use bindgeom::synth::two_np_instance;
use bindgeom_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(bg_last_error_message()) }.to_string_lossy().into_owned()
}

fn matrix(m: &bindgeom::Matrix) -> *mut BgMatrix {
    let mut out = ptr::null_mut();
    let status = unsafe { bg_matrix_new(m.rows(), m.cols(), m.as_slice().as_ptr(), &mut out) };
    assert_eq!(status, BgStatus::Ok);
    out
}

fn contents(m: *const BgMatrix) -> Vec<f64> {
    unsafe {
        let n = bg_matrix_rows(m) * bg_matrix_cols(m);
        std::slice::from_raw_parts(bg_matrix_data(m), n).to_vec()
    }
}

#[test]
fn matrix_round_trip_through_embx() {
    let inst = two_np_instance(0);
    let m = matrix(&inst.embeddings);
    unsafe {
        assert_eq!((bg_matrix_rows(m), bg_matrix_cols(m)), (10, 16));
        let (mut bytes, mut len) = (ptr::null_mut(), 0usize);
        assert_eq!(bg_embx_write(m, 1, &mut bytes, &mut len), BgStatus::Ok);
        let slice = std::slice::from_raw_parts(bytes, len);
        assert_eq!(slice, bindgeom::embx::write_embx(&inst.embeddings, bindgeom::embx::Dtype::F64));

        let (mut back, mut dtype) = (ptr::null_mut(), 9u8);
        assert_eq!(bg_embx_read(bytes, len, &mut back, &mut dtype), BgStatus::Ok);
        assert_eq!(dtype, 1);
        assert_eq!(contents(back), inst.embeddings.as_slice());
        bg_bytes_free(bytes, len);
        bg_matrix_free(back);
        bg_matrix_free(m);
    }
}

#[test]
fn file_round_trip_keeps_dtype() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.embx").to_str().unwrap()).unwrap();
    let m = matrix(&two_np_instance(1).latents);
    unsafe {
        assert_eq!(bg_embx_save(path.as_ptr(), m, 0), BgStatus::Ok);
        let (mut back, mut dtype) = (ptr::null_mut(), 9u8);
        assert_eq!(bg_embx_load(path.as_ptr(), &mut back, &mut dtype), BgStatus::Ok);
        assert_eq!(dtype, 0);
        bg_matrix_free(back);
        bg_matrix_free(m);
    }
}

#[test]
fn error_codes_and_messages() {
    unsafe {
        let mut out = ptr::null_mut();
        let bad = b"XBME\x01\x00\x00\x00";
        assert_eq!(bg_embx_read(bad.as_ptr(), bad.len(), &mut out, ptr::null_mut()), BgStatus::Format);
        assert!(last_error().contains("magic"));
        assert!(out.is_null());

        assert_eq!(bg_embx_read(bad.as_ptr(), bad.len(), ptr::null_mut(), ptr::null_mut()), BgStatus::NullPointer);
        assert!(last_error().contains("out"));

        let data = [1.0, f64::NAN];
        assert_eq!(bg_matrix_new(1, 2, data.as_ptr(), &mut out), BgStatus::Format);
        assert_eq!(bg_matrix_new(1, 2, ptr::null(), &mut out), BgStatus::NullPointer);

        let missing = CString::new("/nonexistent/x.embx").unwrap();
        assert_eq!(bg_embx_load(missing.as_ptr(), &mut out, ptr::null_mut()), BgStatus::Io);

        let m = matrix(&bindgeom::Matrix::identity(2));
        let (mut bytes, mut len) = (ptr::null_mut(), 0usize);
        assert_eq!(bg_embx_write(m, 7, &mut bytes, &mut len), BgStatus::Format);
        bg_matrix_free(m);

        let mut ann = ptr::null_mut();
        let prompt = CString::new("a purple unicorn").unwrap();
        assert_eq!(bg_parse_prompt(prompt.as_ptr(), 0, &mut ann), BgStatus::Parse);
        let json = CString::new("{\"token_count\": 1}").unwrap();
        assert_eq!(bg_annotation_load(json.as_ptr(), &mut ann), BgStatus::Format);
    }
}

#[test]
fn annotation_accessors_and_json() {
    unsafe {
        let mut ann = ptr::null_mut();
        let prompt = CString::new("a red cat and a blue dog").unwrap();
        assert_eq!(bg_parse_prompt(prompt.as_ptr(), 10, &mut ann), BgStatus::Ok);
        assert_eq!(bg_annotation_token_count(ann), 10);
        assert_eq!(bg_annotation_np_count(ann), 2);
        let mut obj = 0usize;
        assert_eq!(bg_annotation_object_index(ann, 1, &mut obj), BgStatus::Ok);
        assert_eq!(obj, 6);
        assert_eq!(bg_annotation_object_index(ann, 2, &mut obj), BgStatus::Shape);

        let json = bg_annotation_to_json(ann);
        let mut again = ptr::null_mut();
        assert_eq!(bg_annotation_load(json, &mut again), BgStatus::Ok);
        assert_eq!(bg_annotation_token_count(again), 10);
        bg_string_free(json);
        bg_annotation_free(again);
        bg_annotation_free(ann);
        bg_annotation_free(ptr::null_mut());
    }
}

#[test]
fn algorithms_match_the_library() {
    let inst = two_np_instance(3);
    let (h, t) = (matrix(&inst.latents), matrix(&inst.embeddings));
    let (wq, wk, wv) = (matrix(&inst.weights.w_q), matrix(&inst.weights.w_k), matrix(&inst.weights.w_v));
    unsafe {
        let mut ann = ptr::null_mut();
        let json = CString::new(bindgeom::prompt::save_annotation(&inst.annotation)).unwrap();
        assert_eq!(bg_annotation_load(json.as_ptr(), &mut ann), BgStatus::Ok);

        let mut capo = ptr::null_mut();
        assert_eq!(bg_apply_capo(t, ann, BgMode::Causal, false, &mut capo), BgStatus::Ok);
        let expected = bindgeom::capo::apply_capo(
            &inst.embeddings,
            &inst.annotation,
            bindgeom::capo::CausalityMode::Causal,
            Default::default(),
        )
        .unwrap();
        assert_eq!(contents(capo), expected.embeddings.as_slice());

        let (mut p, mut a) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(bg_cross_attention(h, t, wq, wk, wv, &mut p, &mut a), BgStatus::Ok);
        let state = bindgeom::attention::cross_attention_maps(&inst.latents, &inst.embeddings, &inst.weights).unwrap();
        assert_eq!(contents(p), state.p.as_slice());
        assert_eq!(contents(a), state.a.as_slice());

        let mut loss = BgLoss::default();
        assert_eq!(bg_total_loss(h, t, wq, wk, wv, ann, 0.01, &mut loss), BgStatus::Ok);
        let lb = bindgeom::optim::total_loss(&state, &inst.annotation, 0.01).unwrap();
        assert_eq!((loss.ent, loss.bhat, loss.total), (lb.ent, lb.bhat, lb.total));
        assert_eq!(bg_total_loss(h, t, wq, wk, wv, ann, -1.0, &mut loss), BgStatus::InvalidArgument);
        // Mismatched weight shapes.
        assert_eq!(bg_total_loss(h, t, wk, wk, wv, ann, 0.01, &mut loss), BgStatus::Shape);

        // Identical object tokens are near-singular under joint orthogonalisation.
        let mut dup = inst.embeddings.clone();
        let obj = dup.row(2).to_vec();
        dup.set_row(6, &obj);
        let dup = matrix(&dup);
        let mut out = ptr::null_mut();
        assert_eq!(bg_apply_capo(dup, ann, BgMode::NonCausal, false, &mut out), BgStatus::Numerical);
        assert!(last_error().contains("singular"));

        for m in [h, t, wq, wk, wv, capo, p, a, dup] {
            bg_matrix_free(m);
        }
        bg_annotation_free(ann);
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(bg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
