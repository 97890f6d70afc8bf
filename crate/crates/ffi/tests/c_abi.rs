use std::ffi::{CStr, CString};
use std::ptr;

use sparse_verify::planner::{default_candidates, Candidate, PrecisionClass, ProfileTable};
use sparse_verify::prompts::synthetic_prompt;
use sparse_verify_ffi::*;

fn engine() -> *mut SvEngine {
    let mut e = ptr::null_mut();
    let st = unsafe { sv_engine_new(SvModelSize::Small, 3, 2, &mut e) };
    assert_eq!(st, SvStatus::Ok);
    e
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(sv_last_error()) }.to_string_lossy().into_owned()
}

fn profile_json() -> CString {
    let mut t = ProfileTable::new();
    for b in 0..4 {
        for class in PrecisionClass::ALL {
            let cands = default_candidates(class, 4)
                .into_iter()
                .enumerate()
                .map(|(i, s)| Candidate::new(s, 3.0 - 0.1 * i as f64, 100.0 + i as f64))
                .collect();
            t.insert(b, class, cands);
        }
    }
    CString::new(t.to_json().unwrap()).unwrap()
}

#[test]
fn strict_spec_decode_matches_ar_across_the_abi() {
    let e = engine();
    let prompt = synthetic_prompt(5, 200);
    let mut ar = vec![0u32; 40];
    let mut ar_len = 0;
    let mut sp = vec![0u32; 40];
    let mut sp_len = 0;
    let mut stats = SvDecodeStats::default();
    let strategy = CString::new("4,2,DFS,2,exact").unwrap();
    unsafe {
        let st = sv_decode_autoregressive(e, prompt.as_ptr(), prompt.len(), 32, ar.as_mut_ptr(), 40, &mut ar_len);
        assert_eq!(st, SvStatus::Ok);
        let st = sv_decode_speculative(
            e,
            prompt.as_ptr(),
            prompt.len(),
            32,
            SvPrecisionClass::Strict,
            strategy.as_ptr(),
            ptr::null(),
            ptr::null(),
            false,
            sp.as_mut_ptr(),
            40,
            &mut sp_len,
            &mut stats,
        );
        assert_eq!(st, SvStatus::Ok, "{}", last_error());
        sv_engine_free(e);
    }
    assert_eq!(ar_len, 32);
    assert_eq!(ar[..ar_len], sp[..sp_len]);
    assert_eq!(stats.total_accepted, 32);
    assert!(stats.mean_accepted >= 1.0);
}

#[test]
fn errors_carry_codes_and_messages() {
    let e = engine();
    let prompt = [1u32, 2, 3];
    let mut out = [0u32; 2];
    let mut len = 0;
    unsafe {
        let st = sv_decode_autoregressive(e, prompt.as_ptr(), 3, 8, out.as_mut_ptr(), 2, &mut len);
        assert_eq!(st, SvStatus::BufferTooSmall);
        assert_eq!(len, 8);
        let s = CString::new("4,2,BFS,2,exact").unwrap();
        let st = sv_decode_speculative(
            e, prompt.as_ptr(), 3, 4, SvPrecisionClass::Strict, s.as_ptr(),
            ptr::null(), ptr::null(), false, out.as_mut_ptr(), 2, &mut len, ptr::null_mut(),
        );
        assert_eq!(st, SvStatus::BufferTooSmall);
        let approx = CString::new("4,2,BFS,2,approx").unwrap();
        let st = sv_decode_speculative(
            e, prompt.as_ptr(), 3, 4, SvPrecisionClass::Strict, approx.as_ptr(),
            ptr::null(), ptr::null(), false, out.as_mut_ptr(), 2, &mut len, ptr::null_mut(),
        );
        assert_eq!(st, SvStatus::Config);
        assert!(!last_error().is_empty());
        sv_engine_free(e);

        let mut h = ptr::null_mut();
        assert_eq!(sv_engine_new(SvModelSize::Small, 1, 0, &mut h), SvStatus::Config);
        assert!(h.is_null());
        assert_eq!(sv_engine_new(SvModelSize::Small, 1, 2, ptr::null_mut()), SvStatus::NullPointer);
        let junk = CString::new("{not json").unwrap();
        let mut p = ptr::null_mut();
        assert_eq!(sv_profile_from_json(junk.as_ptr(), &mut p), SvStatus::Parse);
    }
}

#[test]
fn profile_preselect_and_refiner() {
    let json = profile_json();
    let mut p = ptr::null_mut();
    let mut buf = [0 as std::ffi::c_char; 64];
    let mut needed = 0;
    let mut exp_a = 0.0;
    unsafe {
        assert_eq!(sv_profile_from_json(json.as_ptr(), &mut p), SvStatus::Ok);
        let st = sv_preselect(p, 5000, SvPrecisionClass::Strict, buf.as_mut_ptr(), 64, &mut needed, &mut exp_a);
        assert_eq!(st, SvStatus::Ok);
        assert_eq!(exp_a, 3.0);
        let label = CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_string();
        assert_eq!(needed, label.len() + 1);

        let mut r = ptr::null_mut();
        assert_eq!(sv_refiner_new(p, 5000, SvPrecisionClass::Strict, &mut r), SvStatus::Ok);
        let mut switched_at = None;
        for step in 1..=32 {
            let mut changed = false;
            assert_eq!(sv_refiner_step(r, p, 1, 10.0, step, &mut changed), SvStatus::Ok);
            if changed && switched_at.is_none() {
                switched_at = Some(step);
            }
        }
        assert_eq!(switched_at, Some(13));
        assert_eq!(sv_refiner_events(r), 2);
        let st = sv_refiner_active(r, buf.as_mut_ptr(), 64, &mut needed);
        assert_eq!(st, SvStatus::Ok);
        sv_refiner_free(r);
        sv_profile_free(p);
    }
}

#[test]
fn roles_schedule_and_latency() {
    let reuse = [1usize, 2, 5];
    let mut src = [0i64; 6];
    unsafe {
        assert_eq!(sv_resolve_layer_roles(6, reuse.as_ptr(), 3, src.as_mut_ptr()), SvStatus::Ok);
        assert_eq!(src, [-1, 0, 0, -1, -1, 4]);
        let bad = [0usize];
        assert_eq!(sv_resolve_layer_roles(6, bad.as_ptr(), 1, src.as_mut_ptr()), SvStatus::Config);

        let blocks = [0u32, 1, 2, 3, 2, 3, 4, 5];
        let lens = [4usize, 4];
        let mut uniq = [0u32; 8];
        let (mut n, mut req) = (0, 0);
        let st = sv_merged_schedule(blocks.as_ptr(), lens.as_ptr(), 2, uniq.as_mut_ptr(), 8, &mut n, &mut req);
        assert_eq!(st, SvStatus::Ok);
        assert_eq!(&uniq[..n], &[0, 1, 2, 3, 4, 5]);
        assert_eq!(req, 8);

        let acc = SvStepAccounting {
            unique_loads: 10,
            requested_loads: 12,
            index_constructions: 3,
            launches: 4,
            window_tokens: 100,
        };
        let c = SvCostCoeffs { c_block: 1.0, c_index: 2.0, c_launch: 3.0, c_window: 0.5, c_base: 7.0 };
        let mut t = 0.0;
        assert_eq!(sv_estimate_latency(&acc, &c, &mut t), SvStatus::Ok);
        assert_eq!(t, 7.0 + 10.0 + 6.0 + 12.0 + 50.0);
        let neg = SvCostCoeffs { c_block: -1.0, ..c };
        assert_eq!(sv_estimate_latency(&acc, &neg, &mut t), SvStatus::Config);
    }
}

#[test]
fn header_declares_the_abi() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sparse_verify.h")).unwrap();
    for sym in [
        "sv_engine_new",
        "sv_decode_speculative",
        "sv_refiner_step",
        "sv_merged_schedule",
        "sv_estimate_latency",
        "typedef struct SvEngine SvEngine",
        "SV_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(h.contains(sym), "{sym} missing from header");
    }
}
