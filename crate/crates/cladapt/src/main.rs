// The simulation loop allocates small heap vectors at a high rate through
// the dynamically sized linear-algebra types; a thread-local allocator
// roughly halves the wall-clock cost of a run compared to the system one.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    std::process::exit(cladapt::cli::entry());
}
