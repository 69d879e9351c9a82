#![allow(dead_code)]

use gpanet::datasets::{make_repetitions, synth_images, Aspect, EvalProtocol, ImageLibrary, ProtocolConfig};

/// In-memory synthetic dataset with its repeated protocols.
pub fn desk_data(ids: usize, per_id: usize, size: usize, seed: u64, reps: usize) -> (Vec<EvalProtocol>, ImageLibrary) {
    let items = synth_images(ids, per_id, size, seed).unwrap();
    let mut lib = ImageLibrary::new("", size);
    let mut records = Vec::new();
    for (r, img) in items {
        lib.insert(r.image_path.clone(), img);
        records.push(r);
    }
    let protocols = make_repetitions(&records, &ProtocolConfig::single(Aspect::None), reps, seed).unwrap();
    (protocols, lib)
}
