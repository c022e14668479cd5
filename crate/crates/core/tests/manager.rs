mod common;

use std::sync::Arc;

use common::*;
use taemu::manager::*;
use taemu::vtee::*;
use taemu::{CrashClass, ExecOutcome, ViolationKind};

const IN_OUT: u16 = param_types(TEE_PARAM_TYPE_MEMREF_INPUT, TEE_PARAM_TYPE_MEMREF_OUTPUT, 0, 0);

#[test]
fn identity_returns_success() {
    let mut ta = instance("identity");
    let s = session(&mut ta);
    let r = ta.invoke_command(s, 0, &GpParamSet::empty()).unwrap();
    assert_eq!(r.return_code, TEE_SUCCESS);
    assert_eq!(r.return_origin, TEE_ORIGIN_TRUSTED_APP);
    assert_eq!(r.outcome, ExecOutcome::ReturnedFromEntrypoint);
}

#[test]
fn unknown_session_is_an_error() {
    let mut ta = instance("identity");
    assert!(matches!(
        ta.invoke_command(9, 0, &GpParamSet::empty()),
        Err(ManagerError::BadHandle(9))
    ));
}

#[test]
fn echo_copies_and_sets_size() {
    let mut ta = instance("echo");
    let s = session(&mut ta);
    let params = GpParamSet::new(
        IN_OUT,
        [GpParam::memref(b"hello".to_vec()), GpParam::memref(vec![0; 16]), GpParam::None, GpParam::None],
    );
    let r = ta.invoke_command(s, 0, &params).unwrap();
    assert_eq!(r.return_code, 0);
    assert_eq!(r.out_params[1], OutParam::Memref { data: b"hello".to_vec(), size: 5 });
}

#[test]
fn cipher_checks_types() {
    let mut ta = instance("cipher");
    let s = session(&mut ta);
    let r = ta.invoke_command(s, 0, &GpParamSet::new(0x0055, Default::default())).unwrap();
    assert_eq!(r.return_code, TEE_ERROR_BAD_PARAMETERS);
    assert_eq!(r.log, vec!["bad parameter types!".to_string()]);
}

#[test]
fn cipher_xors_with_device_key() {
    let mut ta = instance("cipher");
    let s = session(&mut ta);
    let input = b"attack at dawn, bring snacks".to_vec();
    let params = GpParamSet::new(
        0x0065,
        [GpParam::memref(input.clone()), GpParam::memref(vec![0; 64]), GpParam::None, GpParam::None],
    );
    let r = ta.invoke_command(s, 0, &params).unwrap();
    assert_eq!(r.return_code, 0, "{:?}", r.outcome);
    let want: Vec<u8> = input.iter().zip(DEVICE_KEY.iter().cycle()).map(|(a, k)| a ^ k).collect();
    assert_eq!(r.out_params[1].bytes(), &want[..]);
}

#[test]
fn missing_key_api_crashes_without_extensions() {
    let mut ta = instance_with("cipher", ApiRegistry::new());
    let s = session(&mut ta);
    let params = GpParamSet::new(0x0065, [GpParam::memref(vec![1; 8]), GpParam::memref(vec![0; 8]), GpParam::None, GpParam::None]);
    let r = ta.invoke_command(s, 0, &params).unwrap();
    let c = r.outcome.crash().unwrap();
    assert_eq!(c.class, CrashClass::MissingApi("tee_get_key".into()));
    assert_eq!((r.return_code, r.return_origin), (TEE_ERROR_TARGET_DEAD, TEE_ORIGIN_TEE));
}

#[test]
fn keyinstall_installs_keys() {
    let mut ta = instance("keyinstall");
    let s = session(&mut ta);
    let mut input = key_record(2, 0x1111_2222);
    input.extend(key_record(0, 0x3333_4444));
    let params = GpParamSet::new(IN_OUT, [GpParam::memref(input), GpParam::memref(vec![0; 8]), GpParam::None, GpParam::None]);
    let r = ta.invoke_command(s, 0, &params).unwrap();
    assert_eq!(r.return_code, 0, "{:?}", r.outcome);
    assert_eq!(r.out_params[1].bytes(), [0x1111_2222u32.to_le_bytes(), 0x3333_4444u32.to_le_bytes()].concat());
    assert_eq!(r.log.len(), 2);
}

#[test]
fn keyinstall_type_confusion_overwrites_got() {
    let asm = assembly("keyinstall");
    let got = asm.symbol("got.msee_ta_printf_va").unwrap();
    let mut ta = instance("keyinstall");
    let s = session(&mut ta);
    let types = param_types(TEE_PARAM_TYPE_MEMREF_INPUT, TEE_PARAM_TYPE_VALUE_INPUT, 0, 0);
    let params = GpParamSet::new(
        types,
        [GpParam::memref(key_record(1, 0x4141_4140)), GpParam::value(got, 4), GpParam::None, GpParam::None],
    );
    let r = ta.invoke_command(s, 0, &params).unwrap();
    let c = r.outcome.crash().expect("crash");
    assert_eq!(c.class, CrashClass::InvalidMemAccess);
    assert_eq!(c.fault_pc, 0x4141_4140);
    assert_eq!((r.return_code, r.return_origin), (TEE_ERROR_TARGET_DEAD, TEE_ORIGIN_TEE));
}

#[test]
fn any_param_types_value_is_forwarded() {
    let mut ta = instance("identity");
    let s = session(&mut ta);
    for t in [0u16, 0x0065, 0xFFFF, 0x1234, 0x8888] {
        let r = ta.invoke_command(s, 0, &GpParamSet::new(t, Default::default())).unwrap();
        assert_eq!(r.return_code, 0);
        assert_eq!(ta.guest.regs[2], t as u32);
    }
}

#[test]
fn budget_exhaustion_is_target_dead() {
    let mut ta = instance("loop");
    ta.guest.instruction_budget = 10_000;
    let s = session(&mut ta);
    let r = ta.invoke_command(s, 0, &GpParamSet::empty()).unwrap();
    assert_eq!(r.outcome, ExecOutcome::BudgetExhausted);
    assert_eq!(r.return_code, TEE_ERROR_TARGET_DEAD);
}

#[test]
fn static_ta_inline_hook() {
    let mut ta = instance("static");
    let s = session(&mut ta);
    let r = ta.invoke_command(s, 0, &GpParamSet::empty()).unwrap();
    assert_eq!(r.return_code, 0, "{:?}", r.outcome);
    assert_eq!(r.log, vec!["static hello".to_string()]);
}

/// Rewrites the shared length word at the pause point.
struct Mutator(Option<Arc<MemBacking>>);

impl PauseHook for Mutator {
    fn before_api(&mut self, api: &str, _: &mut TeeState) {
        assert_eq!(api, "TEE_Wait");
        if let Some(b) = &self.0 {
            b.write_at(0, &64u32.to_le_bytes());
        }
    }
}

fn tocttou_run(mutate: bool) -> InvocationResult {
    let mut ta = instance("tocttou");
    ta.tee.pause_at.insert("TEE_Wait".into());
    let s = session(&mut ta);
    let backing = Arc::new(MemBacking::new(&[0; 128]));
    backing.write_at(0, &8u32.to_le_bytes());
    let params = GpParamSet::new(
        param_types(TEE_PARAM_TYPE_MEMREF_INOUT, 0, 0, 0),
        [GpParam::Shared { backing: backing.clone(), size: 128 }, GpParam::None, GpParam::None, GpParam::None],
    );
    let mut hook = Mutator(mutate.then_some(backing));
    ta.invoke_command_with(s, 0, &params, Some(&mut hook)).unwrap()
}

#[test]
fn tocttou_mutation_between_check_and_use() {
    let r = tocttou_run(true);
    match &r.outcome.crash().expect("crash").class {
        CrashClass::AsanViolation { violation, api } => {
            assert_eq!(violation.kind, ViolationKind::OobWrite);
            assert_eq!(api, "TEE_MemMove");
        }
        c => panic!("{c:?}"),
    }
    let r = tocttou_run(false);
    assert_eq!(r.return_code, 0);
}

#[test]
fn snapshot_restore_replays_identically() {
    let mut ta = instance("echo");
    let s = session(&mut ta);
    let snap = ta.snapshot();
    let p = GpParamSet::new(IN_OUT, [GpParam::memref(b"abc".to_vec()), GpParam::memref(vec![0; 4]), GpParam::None, GpParam::None]);
    let a = ta.invoke_command(s, 0, &p).unwrap();
    ta.restore(&snap);
    let b = ta.invoke_command(s, 0, &p).unwrap();
    assert_eq!(a, b);
}
