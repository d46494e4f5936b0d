//! Property tests for the register's structural invariants. Sequences of
//! randomized operations (some honest, some deliberately defective) are run
//! against a live register; after every single step the whole-ledger
//! invariants must hold, and any rejected operation must leave the state
//! exactly as it found it.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use pqcbdc_core::crypto::{self, Drbg, KeyPair, SchemeId, Signature};
use pqcbdc_core::register::{
    Addr, RegisterConfig, RegisterState, TokenId, TransferInput, TransferOutput, TransferRequest,
    Version, V1,
};

/// One abstract operation. Indices are reduced modulo the live set at
/// execution time, so every generated value is meaningful whatever the
/// current ledger looks like.
#[derive(Debug, Clone)]
enum PropOp {
    Mint {
        value: u64,
        version: Version,
    },
    Advance {
        delta: u64,
    },
    Transfer {
        input_seed: usize,
        two_inputs: bool,
        split: u64,
        defect: Defect,
    },
    Convert {
        input_seed: usize,
        to_version: Version,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Defect {
    None,
    /// Outputs sum to one more than the inputs.
    ValueDrift,
    /// First output carries zero value.
    ZeroOutput,
    /// Signature bytes corrupted after signing.
    BadSignature,
    /// The wrong wallet's key signs (and is presented as the owner).
    ForeignOwner,
    /// First input names an already-spent token.
    SpentInput,
    /// Same token listed as both inputs.
    DuplicateInput,
}

fn defect_strategy() -> impl Strategy<Value = Defect> {
    prop_oneof![
        4 => Just(Defect::None),
        1 => Just(Defect::ValueDrift),
        1 => Just(Defect::ZeroOutput),
        1 => Just(Defect::BadSignature),
        1 => Just(Defect::ForeignOwner),
        1 => Just(Defect::SpentInput),
        1 => Just(Defect::DuplicateInput),
    ]
}

fn op_strategy() -> impl Strategy<Value = PropOp> {
    prop_oneof![
        2 => (1u64..500, 1u16..=2).prop_map(|(value, version)| PropOp::Mint { value, version }),
        1 => (0u64..250).prop_map(|delta| PropOp::Advance { delta }),
        5 => (any::<usize>(), any::<bool>(), any::<u64>(), defect_strategy()).prop_map(
            |(input_seed, two_inputs, split, defect)| PropOp::Transfer {
                input_seed,
                two_inputs,
                split,
                defect,
            }
        ),
        2 => (any::<usize>(), 1u16..=2).prop_map(|(input_seed, to_version)| PropOp::Convert {
            input_seed,
            to_version,
        }),
    ]
}

struct Driver {
    register: RegisterState,
    rng: Drbg,
    keys: BTreeMap<Addr, KeyPair>,
    live: Vec<TokenId>,
    ever_spent: BTreeSet<TokenId>,
    foreign_key: KeyPair,
}

fn placeholder_sig() -> Signature {
    Signature {
        scheme: SchemeId::ClassicalSchnorr,
        payload: Vec::new(),
        leaf_index: None,
    }
}

impl Driver {
    fn new(seed: [u8; 32]) -> Driver {
        let mut rng = Drbg::new(seed);
        let config = RegisterConfig {
            receipt_tree_height: 7,
            v2_activation: 50,
            soft_deadline: 200,
            hard_deadline: 400,
            downgrade_allowed: false,
            ..RegisterConfig::default()
        };
        let register = RegisterState::new(config, &mut rng).unwrap();
        let cfg = register.config.scheme.clone();
        let foreign_key = crypto::keygen(&cfg, SchemeId::ClassicalSchnorr, &mut rng).unwrap();
        Driver {
            register,
            rng,
            keys: BTreeMap::new(),
            live: Vec::new(),
            ever_spent: BTreeSet::new(),
            foreign_key,
        }
    }

    fn fresh_addr(&mut self, version: Version) -> Addr {
        let scheme = if version == V1 {
            SchemeId::ClassicalSchnorr
        } else {
            SchemeId::PqWots
        };
        let key = crypto::keygen(&self.register.config.scheme, scheme, &mut self.rng).unwrap();
        let addr = key.public_key().addr();
        self.keys.insert(addr, key);
        addr
    }

    fn run(&mut self, op: &PropOp) {
        let before = self.register.clone();
        let accepted = self.execute(op);
        if !accepted {
            assert_eq!(
                self.register, before,
                "a rejected operation changed the register: {op:?}"
            );
        }
        self.check_invariants(op);
    }

    fn execute(&mut self, op: &PropOp) -> bool {
        match *op {
            PropOp::Mint { value, version } => {
                let addr = self.fresh_addr(version);
                match self.register.mint(value, addr, version) {
                    Ok(token) => {
                        self.live.push(token.token_id);
                        true
                    }
                    Err(_) => false,
                }
            }
            PropOp::Advance { delta } => {
                let now = self.register.clock + delta;
                self.register.advance_clock(now);
                true
            }
            PropOp::Transfer {
                input_seed,
                two_inputs,
                split,
                defect,
            } => {
                if self.live.is_empty() {
                    return false;
                }
                let first = input_seed % self.live.len();
                let mut positions = vec![first];
                if two_inputs && self.live.len() > 1 {
                    let second = (input_seed / 7 + 1 + first) % self.live.len();
                    if second != first {
                        positions.push(second);
                    }
                }
                let input_ids: Vec<TokenId> = positions.iter().map(|&p| self.live[p]).collect();
                let total: u64 = input_ids
                    .iter()
                    .map(|id| self.register.live[id].value)
                    .sum();
                // Outputs keep the maximum input version so the downgrade
                // rule never fires on honest submissions.
                let out_version = input_ids
                    .iter()
                    .filter_map(|id| self.register.live.get(id).map(|t| t.version))
                    .max()
                    .unwrap_or(V1);
                let mut values = vec![total];
                if total >= 2 && split % 2 == 0 {
                    let cut = 1 + split % (total - 1).max(1);
                    if cut < total {
                        values = vec![cut, total - cut];
                    }
                }
                let outputs: Vec<TransferOutput> = values
                    .iter()
                    .map(|&value| TransferOutput {
                        value,
                        owner_addr: self.fresh_addr(out_version),
                        version: out_version,
                    })
                    .collect();
                self.submit(input_ids, outputs, defect)
            }
            PropOp::Convert {
                input_seed,
                to_version,
            } => {
                if self.live.is_empty() {
                    return false;
                }
                let pos = input_seed % self.live.len();
                let token_id = self.live[pos];
                let token = self.register.live[&token_id].clone();
                let owner = token.owner_addr;
                let new_addr = self.fresh_addr(to_version);
                let req = TransferRequest {
                    inputs: vec![TransferInput {
                        token_id,
                        owner_pub: self.keys[&owner].public_key(),
                        signature: placeholder_sig(),
                    }],
                    outputs: vec![TransferOutput {
                        value: token.value,
                        owner_addr: new_addr,
                        version: to_version,
                    }],
                };
                let bytes = req.signing_bytes();
                let mut key = self.keys[&owner].clone();
                let signature =
                    crypto::sign(&self.register.config.scheme, &mut key, &bytes).unwrap();
                let now = self.register.clock;
                match self.register.convert_version(
                    token_id,
                    req.inputs[0].owner_pub.clone(),
                    signature,
                    to_version,
                    new_addr,
                    now,
                ) {
                    Ok((token, _)) => {
                        self.live.retain(|id| *id != token_id);
                        self.ever_spent.insert(token_id);
                        self.live.push(token.token_id);
                        true
                    }
                    Err(_) => false,
                }
            }
        }
    }

    fn submit(
        &mut self,
        mut input_ids: Vec<TokenId>,
        mut outputs: Vec<TransferOutput>,
        defect: Defect,
    ) -> bool {
        match defect {
            Defect::ValueDrift => outputs[0].value += 1,
            Defect::ZeroOutput => {
                let moved = outputs[0].value;
                outputs[0].value = 0;
                if outputs.len() > 1 {
                    outputs[1].value += moved;
                }
            }
            Defect::SpentInput => {
                if let Some(spent) = self.ever_spent.iter().next() {
                    input_ids[0] = *spent;
                } else {
                    input_ids[0] = [0xAB; 16];
                }
            }
            Defect::DuplicateInput => {
                let dup = input_ids[0];
                input_ids.push(dup);
            }
            _ => {}
        }
        let first_id = input_ids[0];
        let mut req = TransferRequest {
            inputs: input_ids
                .iter()
                .map(|id| {
                    let owner_pub = match self.register.live.get(id) {
                        Some(t) => self.keys[&t.owner_addr].public_key(),
                        None => self.foreign_key.public_key(),
                    };
                    TransferInput {
                        token_id: *id,
                        owner_pub,
                        signature: placeholder_sig(),
                    }
                })
                .collect(),
            outputs,
        };
        if defect == Defect::ForeignOwner {
            req.inputs[0].owner_pub = self.foreign_key.public_key();
        }
        let bytes = req.signing_bytes();
        for input in &mut req.inputs {
            let missign = defect == Defect::ForeignOwner && input.token_id == first_id;
            let mut key = match self.register.live.get(&input.token_id) {
                Some(t) if !missign => self.keys[&t.owner_addr].clone(),
                _ => self.foreign_key.clone(),
            };
            input.signature = crypto::sign(&self.register.config.scheme, &mut key, &bytes).unwrap();
        }
        if defect == Defect::BadSignature {
            req.inputs[0].signature.payload[5] ^= 0x10;
        }
        let now = self.register.clock;
        match self.register.validate_transfer(&req, now) {
            Ok(_) => {
                assert_eq!(
                    defect,
                    Defect::None,
                    "a defective request settled: {defect:?}"
                );
                let spent: BTreeSet<TokenId> = req.inputs.iter().map(|i| i.token_id).collect();
                self.live.retain(|id| !spent.contains(id));
                self.ever_spent.extend(spent);
                for index in 0..req.outputs.len() {
                    self.live.push(req.output_token_id(index));
                }
                true
            }
            Err(_) => false,
        }
    }

    fn check_invariants(&self, op: &PropOp) {
        assert_eq!(
            self.register.live_value(),
            self.register.total_minted,
            "conservation violated after {op:?}"
        );
        for id in &self.ever_spent {
            assert!(
                !self.register.live.contains_key(id),
                "spent token resurrected after {op:?}"
            );
            assert!(
                self.register.spent.contains(id),
                "spent set forgot a token after {op:?}"
            );
        }
        for id in &self.live {
            assert!(
                self.register.live.contains_key(id),
                "driver expected {} live after {op:?}",
                hex::encode(id)
            );
        }
        assert_eq!(self.register.live.len(), self.live.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn register_invariants_hold_under_random_operations(
        seed in any::<[u8; 32]>(),
        ops in proptest::collection::vec(op_strategy(), 1..24),
    ) {
        let mut driver = Driver::new(seed);
        // A little genesis value so early transfers have something to move.
        for (value, version) in [(200u64, V1), (90, V1)] {
            let addr = driver.fresh_addr(version);
            let token = driver.register.mint(value, addr, version).unwrap();
            driver.live.push(token.token_id);
        }
        for op in &ops {
            driver.run(op);
        }
        // The event log must replay to exactly the final state.
        prop_assert!(driver.register.audit().is_empty());
    }

    #[test]
    fn rejected_requests_cost_nothing_even_in_bulk(
        seed in any::<[u8; 32]>(),
        defects in proptest::collection::vec(defect_strategy(), 8),
    ) {
        let mut driver = Driver::new(seed);
        let addr = driver.fresh_addr(V1);
        let token = driver.register.mint(150, addr, V1).unwrap();
        driver.live.push(token.token_id);
        let before = driver.register.clone();
        let mut any_rejected = false;
        for defect in defects.iter().filter(|d| **d != Defect::None) {
            let token_id = driver.live[0];
            let value = driver.register.live[&token_id].value;
            let out_addr = driver.fresh_addr(V1);
            let outputs =
                vec![TransferOutput { value, owner_addr: out_addr, version: V1 }];
            let accepted = driver.submit(vec![token_id], outputs, *defect);
            prop_assert!(!accepted, "defect {defect:?} was accepted");
            any_rejected = true;
        }
        if any_rejected {
            prop_assert_eq!(
                &driver.register, &before,
                "rejected-only traffic still moved the register"
            );
        }
    }
}
