use featpipe_serve::alloc::CountingAlloc;

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

fn main() {
    std::process::exit(featpipe_serve::cli::main_with_args(std::env::args_os()));
}
