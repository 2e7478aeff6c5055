pub use tomen::harness::instant::InstantNet as MiniNet;
