use cmdlab::gradcheck::{grad_check, ModuleKind};

#[test]
fn every_network_matches_finite_differences() {
    for kind in [ModuleKind::Autoencoder, ModuleKind::Content, ModuleKind::Motion] {
        let r = grad_check(kind, 1e-4).unwrap();
        assert!(r.failure.is_none(), "{kind:?}: {:?}", r.failure);
        assert!(r.pass, "{kind:?}: max rel err {} at {}", r.max_rel_err, r.worst);
    }
}
