pub mod bundle_adjust;
pub mod data_assoc;
pub mod executor;
pub mod geom;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod rot_avg;
pub mod robust;
pub mod seed;
pub mod synth;
pub mod trans_avg;
pub mod triangulate;
pub mod view_graph;
pub mod two_view;

// The guide's snippets run as doctests; one module per chapter so a failure
// points at its page.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/conventions.md")]
    mod conventions {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/view_graph.md")]
    mod view_graph {}
    #[doc = include_str!("../../../book/src/rotation_averaging.md")]
    mod rotation_averaging {}
    #[doc = include_str!("../../../book/src/translation_averaging.md")]
    mod translation_averaging {}
    #[doc = include_str!("../../../book/src/bundle_adjustment.md")]
    mod bundle_adjustment {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
