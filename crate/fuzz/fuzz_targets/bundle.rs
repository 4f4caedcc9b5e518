#![no_main]
use libfuzzer_sys::fuzz_target;
use weaver_core::collab::CooccurrenceGraph;
use weaver_core::persistence::{decode_codemap, decode_graph, decode_model, to_canonical_bytes, Kind};
use weaver_core::quantizer::{decode, encode, quantize};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_model(data) {
        // a model that validates must run end to end without panicking
        let z = encode(&m, &vec![0.5; m.config.input_dim]).unwrap();
        let q = quantize(&m, &z);
        if m.decoder.is_some() {
            decode(&m, &q.zhat).unwrap();
        }
        let bytes = to_canonical_bytes(Kind::Model, &m).unwrap();
        assert_eq!(decode_model(&bytes).unwrap(), m);
    }
    if let Ok(a) = decode_codemap(data) {
        assert_eq!(a.codes.values().collect::<std::collections::BTreeSet<_>>().len(), a.len());
    }
    if let Ok(g) = decode_graph(data) {
        let doc = g.to_document();
        let back = CooccurrenceGraph::from_document(doc.clone()).unwrap();
        assert_eq!(back.to_document(), doc);
    }
});
